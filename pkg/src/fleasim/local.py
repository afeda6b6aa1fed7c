"""Client-side training: Beta weights, feature mix-up and the local loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .data import ClientDataset, Dataset
from .errors import ShapeError
from .nn import Batch, ModelParams, OptimizerState, adam_step, grad_total_loss


@dataclass
class FeatureRecord:
    activation: np.ndarray
    soft_label: np.ndarray
    origin_client: int
    source_index: int = -1


@dataclass
class FeatureBuffer:
    """Round-scoped pool of shared (activation, label) pairs, stored column-wise."""

    round: int
    features: np.ndarray
    labels: np.ndarray
    origins: np.ndarray
    source_indices: np.ndarray

    @classmethod
    def empty(cls, round_t: int = 1, width: int = 0, num_classes: int = 0) -> "FeatureBuffer":
        return cls(
            round_t,
            np.zeros((0, width)),
            np.zeros((0, num_classes)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.features)

    @property
    def contributors(self) -> list[int]:
        return sorted(set(self.origins.tolist()))

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def records(self) -> list[FeatureRecord]:
        return [
            FeatureRecord(f, y, int(o), int(s))
            for f, y, o, s in zip(self.features, self.labels, self.origins, self.source_indices)
        ]


@dataclass
class MixupParams:
    a: float = 2.0
    seed: int | np.random.Generator | None = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"Beta shape must be positive, got {self.a}")
        self.rng = np.random.default_rng(self.seed)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 3.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def sample_beta(params: MixupParams, n: int) -> np.ndarray:
    """``n`` draws from Beta(a, a) as g1 / (g1 + g2) with g ~ Gamma(a, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g1 = params.rng.standard_gamma(params.a, size=n)
    g2 = params.rng.standard_gamma(params.a, size=n)
    total = g1 + g2
    # both gammas can underflow to 0 for tiny a
    return np.where(total > 0, g1 / np.where(total > 0, total, 1.0), 0.5)


def mixup(local_feats, local_labels, buffer_batch, betas):
    """Row-wise convex combination of local pairs with buffer pairs.

    ``buffer_batch`` is either a list of FeatureRecord or a
    (features, labels) tuple. Returns (mixed features, mixed labels).
    """
    f = np.asarray(local_feats, dtype=float)
    y = np.asarray(local_labels, dtype=float)
    if isinstance(buffer_batch, tuple):
        bf, by = (np.asarray(a, dtype=float) for a in buffer_batch)
    else:
        bf = np.stack([r.activation for r in buffer_batch])
        by = np.stack([r.soft_label for r in buffer_batch])
    b = np.asarray(betas, dtype=float)
    if not (len(f) == len(y) == len(bf) == len(by) == len(b)):
        raise ShapeError("mixup inputs must have equal row counts")
    if f.shape[1] != bf.shape[1]:
        raise ShapeError(f"local feature width {f.shape[1]} != buffer width {bf.shape[1]}")
    if y.shape[1] != by.shape[1]:
        raise ShapeError(f"label widths differ: {y.shape[1]} vs {by.shape[1]}")
    b = b[:, None]
    return b * f + (1 - b) * bf, b * y + (1 - b) * by


@dataclass
class LocalConfig:
    epochs: int = 5
    batch_size: int = 32
    beta_a: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 3.0
    lr: float = 1e-3
    lr_decay: float = 0.02
    lr_floor: float = 1e-5
    prox_rho: float = 0.01
    fixed_beta: float | None = None

    def optimizer(self, params: ModelParams) -> OptimizerState:
        return OptimizerState.fresh(params, lr0=self.lr, decay=self.lr_decay, floor=self.lr_floor)


@dataclass
class LocalResult:
    params: ModelParams
    history: list[dict]  # one dict of loss terms per batch

    def mean_terms(self) -> dict:
        if not self.history:
            return {"clf": 0.0, "dis": 0.0, "dec": 0.0, "total": 0.0}
        return {k: float(np.mean([h[k] for h in self.history])) for k in self.history[0]}


def rng_streams(seed) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for (batch order, pool/buffer draws, Beta weights).

    Keeping batch order on its own stream makes strategies that draw extra
    randomness see the same local batches as plain FedAvg.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def iter_batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Per epoch, a fresh permutation cut into ceil(n / batch_size) near-equal batches."""
    if n == 0:
        return
    parts = -(-n // batch_size)
    for _ in range(epochs):
        yield from np.array_split(rng.permutation(n), parts)


def train_loop(
    init: ModelParams,
    n: int,
    cfg: LocalConfig,
    round_t: int,
    batch_rng: np.random.Generator,
    step: Callable[[ModelParams, np.ndarray], tuple[float, object, dict]],
) -> LocalResult:
    """Generic Adam loop; ``step(params, batch_idx)`` returns (loss, grads, terms)."""
    params = init
    state = cfg.optimizer(init)
    history = []
    for idx in iter_batches(n, cfg.batch_size, cfg.epochs, batch_rng):
        _, grads, terms = step(params, idx)
        params, state = adam_step(state, params, grads, round_t)
        history.append(terms)
    return LocalResult(params, history)


def flea_local_train(
    init: ModelParams,
    snapshot: ModelParams,
    client: ClientDataset,
    dataset: Dataset,
    buffer: FeatureBuffer | None,
    cfg: LocalConfig,
    round_t: int,
    seed=0,
) -> LocalResult:
    """Local FLea update of one client starting from ``init``.

    In round 1 (or with no buffer) the model trains on raw local features
    with classification and de-correlation terms only. Afterwards every
    local batch is paired with an equally sized buffer batch drawn with
    replacement and mixed with Beta(a, a) weights.
    """
    if buffer is not None and len(buffer) and buffer.width != init.feature_width:
        raise ShapeError(
            f"buffer feature width {buffer.width} != model split width {init.feature_width}"
        )
    use_buffer = round_t > 1 and buffer is not None
    if use_buffer and len(buffer) == 0:
        raise ValueError(f"round {round_t}: feature buffer is empty")
    x_all = dataset.inputs[client.indices]
    y_all = dataset.onehot(client.indices)
    batch_rng, buf_rng, beta_rng = rng_streams(seed)
    mix = MixupParams(cfg.beta_a, beta_rng)
    lambda1 = cfg.lambda1 if use_buffer else 0.0

    def step(params, idx):
        batch = Batch(x_all[idx], y_all[idx])
        if use_buffer:
            j = buf_rng.integers(0, len(buffer), size=len(idx))
            buf = (buffer.features[j], buffer.labels[j])
            betas = np.full(len(idx), cfg.fixed_beta) if cfg.fixed_beta is not None else sample_beta(mix, len(idx))
        else:
            buf, betas = None, None
        return grad_total_loss(params, snapshot, batch, buf, betas, lambda1, cfg.lambda2)

    return train_loop(init, len(client), cfg, round_t, batch_rng, step)
