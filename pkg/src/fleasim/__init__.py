"""Desk-scale simulator for federated learning with shared, de-correlated features."""

from .config import RunConfig, parse_config
from .data import Dataset, PartitionSpec, gen_gaussian_mixture, partition
from .experiment import run_experiment
from .federation import FedConfig, aggregate_fedavg, init_state, run_round
from .losses import distance_correlation
from .nn import ModelParams, grad_total_loss, init_model

__all__ = [
    "Dataset",
    "FedConfig",
    "ModelParams",
    "PartitionSpec",
    "RunConfig",
    "aggregate_fedavg",
    "distance_correlation",
    "gen_gaussian_mixture",
    "grad_total_loss",
    "init_model",
    "init_state",
    "parse_config",
    "partition",
    "run_experiment",
    "run_round",
]

__version__ = "0.1.0"
