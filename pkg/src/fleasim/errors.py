"""Exception types raised across the simulator."""


class FleaError(Exception):
    pass


class ShapeError(FleaError, ValueError):
    pass


class NumericalError(FleaError, ArithmeticError):
    pass


class PartitionError(FleaError, ValueError):
    pass


class ParseError(FleaError, ValueError):
    pass


class AggregationError(FleaError, ValueError):
    pass


class ConfigError(FleaError, ValueError):
    pass


class ClientError(FleaError, RuntimeError):
    pass
