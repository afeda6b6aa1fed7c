"""Attacks on shared representations: input reconstruction and context detection.

Both attackers are small tanh MLPs trained with Adam on standardized inputs.
Comparisons between targets only make sense at the same attacker settings,
so the settings live in one ``Attacker`` value that callers pass around.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .losses import clf_with_grad
from .nn import ModelParams, OptimizerState, adam_step, forward, init_model, value_and_grad


@dataclass
class Attacker:
    hidden: tuple = (64, 64)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    min_steps: int = 200


DECODER = Attacker()
DETECTOR = Attacker(hidden=(32, 16, 8), epochs=40)  # four linear layers


@dataclass
class AttackReport:
    kind: str  # "reconstruction" | "context"
    train_sizes: list
    curve: list
    lambda2: float | None = None
    mean_dcor: float | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_sizes = [int(s) for s in self.train_sizes]
        self.curve = [float(v) for v in self.curve]
        if len(self.curve) != len(self.train_sizes):
            raise ShapeError(f"{len(self.curve)} curve points for {len(self.train_sizes)} sizes")
        if not all(math.isfinite(v) for v in self.curve):
            raise ValueError("attack curve contains non-finite values")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


class _Standardizer:
    def __init__(self, x: np.ndarray):
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def _fit(model: ModelParams, x: np.ndarray, loss_fn, targets: np.ndarray, attacker: Attacker, rng) -> ModelParams:
    state = OptimizerState.fresh(model, lr0=attacker.lr, decay=0.0, floor=attacker.lr)
    n = len(x)
    per_epoch = max(1, -(-n // attacker.batch_size))
    epochs = max(attacker.epochs, -(-attacker.min_steps // per_epoch))
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(n), per_epoch):
            _, grads = value_and_grad(model, x[idx], lambda out: loss_fn(out, targets[idx]))
            model, state = adam_step(state, model, grads, 1)
    return model


@dataclass
class Decoder:
    model: ModelParams
    scaler: _Standardizer

    def __call__(self, activations: np.ndarray) -> np.ndarray:
        return forward(self.model, self.scaler(np.asarray(activations, dtype=float)))


def _mse_loss(out, target):
    diff = out - target
    n, d = diff.shape
    return float(np.sum(diff * diff)) / (n * d), 2.0 * diff / (n * d)


def reconstruction_mse(decoder: Callable[[np.ndarray], np.ndarray], activations, inputs) -> float:
    """Mean over pairs of ||decoder(f) - x||^2 / dims."""
    x = np.asarray(inputs, dtype=float)
    if len(x) == 0:
        raise ValueError("no pairs to score")
    diff = decoder(activations) - x
    return float(np.mean(np.sum(diff * diff, axis=1) / x.shape[1]))


def train_reconstructor(
    activations,
    inputs,
    epochs: int | None = None,
    seed: int = 0,
    attacker: Attacker = DECODER,
) -> tuple[Decoder, float]:
    """Fit an MLP mapping activations back to inputs; returns (decoder, final train MSE)."""
    f = np.asarray(activations, dtype=float)
    x = np.asarray(inputs, dtype=float)
    if len(f) != len(x):
        raise ShapeError(f"{len(f)} activations for {len(x)} inputs")
    if len(f) < 10:
        raise ValueError("need at least 10 (activation, input) pairs")
    if epochs is not None:
        attacker = Attacker(attacker.hidden, epochs, attacker.batch_size, attacker.lr, attacker.min_steps)
    rng = np.random.default_rng(seed)
    scaler = _Standardizer(f)
    widths = [f.shape[1], *attacker.hidden, x.shape[1]]
    model = init_model(widths, 1, seed=rng)
    model = _fit(model, scaler(f), _mse_loss, x, attacker, rng)
    decoder = Decoder(model, scaler)
    return decoder, reconstruction_mse(decoder, f, x)


def reconstruction_attack(
    train_pairs: tuple[np.ndarray, np.ndarray],
    test_pairs: tuple[np.ndarray, np.ndarray],
    train_sizes: Sequence[int],
    seed: int = 0,
    attacker: Attacker = DECODER,
) -> AttackReport:
    """Held-out reconstruction MSE after training on the first ``size`` seeded pairs."""
    f, x = (np.asarray(a, dtype=float) for a in train_pairs)
    order = np.random.default_rng([seed, 1]).permutation(len(f))
    curve, train_mse = [], []
    for size in train_sizes:
        if size > len(f):
            raise ValueError(f"train size {size} exceeds {len(f)} available pairs")
        idx = order[:size]
        decoder, mse = train_reconstructor(f[idx], x[idx], seed=seed, attacker=attacker)
        curve.append(reconstruction_mse(decoder, *test_pairs))
        train_mse.append(mse)
    return AttackReport("reconstruction", list(train_sizes), curve, seed=seed, extra={"train_mse": train_mse})


def _onehot2(y: np.ndarray) -> np.ndarray:
    return np.eye(2)[y.astype(int)]


def _balanced_subset(pos: np.ndarray, neg: np.ndarray, size: int, rng) -> np.ndarray:
    k_pos = size // 2
    k_neg = size - k_pos
    if k_pos <= len(pos) and k_neg <= len(neg) and k_pos >= 1:
        return np.concatenate([rng.choice(pos, k_pos, replace=False), rng.choice(neg, k_neg, replace=False)])
    pool = np.concatenate([pos, neg])
    is_pos = np.isin(pool, pos)
    for _ in range(100):
        pick = rng.choice(len(pool), size, replace=False)
        if 0 < is_pos[pick].sum() < size:
            return pool[pick]
    raise ValueError(f"could not draw a subset of {size} rows holding both flag values")


def context_attack(
    features,
    flags,
    train_sizes: Sequence[int],
    seed: int = 0,
    *,
    test_fraction: float = 0.3,
    attacker: Attacker = DETECTOR,
) -> AttackReport:
    """Held-out accuracy of a marker detector trained on balanced subsets of each size."""
    f = np.asarray(features, dtype=float).reshape(len(features), -1)
    y = np.asarray(flags, dtype=bool)
    if len(f) != len(y):
        raise ShapeError(f"{len(f)} feature rows for {len(y)} flags")
    if y.all() or not y.any():
        raise ValueError("both flag values must be present")
    rng = np.random.default_rng(seed)
    test = []
    for value in (True, False):
        rows = np.flatnonzero(y == value)
        test.extend(rng.choice(rows, max(1, int(round(test_fraction * len(rows)))), replace=False))
    test = np.sort(np.asarray(test))
    train = np.setdiff1d(np.arange(len(f)), test)
    pos, neg = train[y[train]], train[~y[train]]
    curve = []
    for size in train_sizes:
        if not 2 <= size <= len(train):
            raise ValueError(f"train size {size} outside [2, {len(train)}]")
        idx = _balanced_subset(pos, neg, size, rng)
        scaler = _Standardizer(f[idx])
        model = init_model([f.shape[1], *attacker.hidden, 2], 1, seed=rng)
        model = _fit(model, scaler(f[idx]), clf_with_grad, _onehot2(y[idx]), attacker, rng)
        pred = forward(model, scaler(f[test])).argmax(axis=1).astype(bool)
        curve.append(float(np.mean(pred == y[test])))
    return AttackReport("context", list(train_sizes), curve, seed=seed)


def samples_to_reach(report: AttackReport, threshold: float = 0.9) -> int | None:
    """Smallest swept training size whose accuracy reaches ``threshold`` (None if never)."""
    for size, value in zip(report.train_sizes, report.curve):
        if value >= threshold:
            return size
    return None


def group_averages(inputs, flags, group: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Means of seeded groups of ``group`` rows sharing a flag value; remainders dropped."""
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(flags, dtype=bool)
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for value in (False, True):
        rows = rng.permutation(np.flatnonzero(y == value))
        m = len(rows) // group
        if m:
            xs.append(x[rows[: m * group]].reshape(m, group, -1).mean(axis=1))
            ys.append(np.full(m, value))
    if not xs:
        raise ValueError(f"fewer than {group} rows per flag value")
    return np.concatenate(xs), np.concatenate(ys)
