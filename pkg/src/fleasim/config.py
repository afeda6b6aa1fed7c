"""Run configuration: a flat JSON object whose unset keys take the documented defaults."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .federation import STRATEGIES

OUT_ENV = "FLEASIM_OUT"


@dataclass
class RunConfig:
    # dataset: Gaussian mixture unless ``csv`` is set
    num_classes: int = 6
    dims: int = 60
    per_class: int = 600
    test_per_class: int = 200
    spread: float = 1.0
    scale: float = 2.5
    modes: int = 1
    nuisance_dims: int = 0
    nuisance_scale: float = 1.0
    csv: str | None = None
    csv_test: str | None = None
    csv_label: str = "label"
    test_fraction: float = 0.25
    # partition
    partition: str = "qua"
    num_clients: int = 60
    mean_size: int = 40
    q: int = 2
    mu: float = 0.5
    # model
    widths: list = field(default_factory=lambda: [32, 16])
    split_index: int = 1
    activation: str = "tanh"
    # federation
    strategy: str = "flea"
    rounds: int = 100
    client_fraction: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    beta_a: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 3.0
    alpha: float = 0.1
    prox_rho: float = 0.01
    lr: float = 1e-3
    lr_decay: float = 0.02
    lr_floor: float = 1e-5
    # bookkeeping
    seeds: list = field(default_factory=lambda: [0])
    out: str | None = None
    name: str | None = None
    threads: int = 1
    timing: bool = True
    checkpoint_every: int = 10
    eval_batch: int = 32
    exposure_symmetric: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.dims >= 2, "dims", "must be >= 2")
        need(self.per_class >= 1 and self.test_per_class >= 1, "per_class", "must be >= 1")
        need(self.spread >= 0, "spread", "must be >= 0")
        need(0 < self.test_fraction < 1, "test_fraction", "must be in (0, 1)")
        need(self.partition.lower() in ("iid", "qua", "dir"), "partition", "one of iid, qua, dir")
        need(self.num_clients >= 1, "num_clients", "must be >= 1")
        need(self.mean_size >= 1, "mean_size", "must be >= 1")
        need(self.q >= 1, "q", "must be >= 1")
        need(self.mu > 0, "mu", "must be > 0")
        need(len(self.widths) >= 1 and all(int(w) >= 1 for w in self.widths), "widths", "positive hidden widths")
        need(1 <= self.split_index <= len(self.widths), "split_index", f"must be in [1, {len(self.widths)}]")
        need(self.strategy.lower() in STRATEGIES, "strategy", f"one of {', '.join(STRATEGIES)}")
        need(self.rounds >= 1, "rounds", "T must be >= 1")
        need(0 < self.client_fraction <= 1, "client_fraction", "must be in (0, 1]")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.beta_a > 0, "beta_a", "must be > 0")
        need(self.lambda1 >= 0, "lambda1", "must be >= 0")
        need(self.lambda2 >= 0, "lambda2", "must be >= 0")
        need(0 < self.alpha <= 1, "alpha", "must be in (0, 1]")
        need(self.prox_rho >= 0, "prox_rho", "must be >= 0")
        need(self.lr > 0 and 0 < self.lr_floor <= self.lr, "lr", "need 0 < lr_floor <= lr")
        need(0 <= self.lr_decay < 1, "lr_decay", "must be in [0, 1)")
        need(len(self.seeds) >= 1, "seeds", "at least one seed")
        need(self.threads >= 1, "threads", "must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        need(self.eval_batch >= 2, "eval_batch", "must be >= 2")
        self.strategy = self.strategy.lower()
        self.partition = self.partition.lower()
        self.widths = [int(w) for w in self.widths]
        self.seeds = [int(s) for s in self.seeds]
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def setting_key(self) -> str:
        """Identifies the data setting, shared by runs that differ only in method."""
        skew = {"iid": "iid", "qua": f"qua{self.q}", "dir": f"dir{self.mu:g}"}[self.partition]
        source = Path(self.csv).stem if self.csv else f"gauss{self.num_classes}x{self.dims}"
        return f"{source}/{skew}/K{self.num_clients}/n{self.mean_size}"

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        root = Path(os.environ.get(OUT_ENV, "runs"))
        name = self.name or f"{self.strategy}-l2_{self.lambda2:g}"
        return root / self.setting_key().replace("/", "_") / name


VALID_KEYS = tuple(f.name for f in fields(RunConfig))


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a flat JSON config; ``overrides`` (CLI flags) win over file values.

    ``None`` override values are ignored so unset flags keep the file's value.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8").strip()
        if text:
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be an object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(VALID_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(VALID_KEYS)}")
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
