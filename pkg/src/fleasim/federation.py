"""Server-side round engine: client sampling, aggregation, buffer upkeep and
the FedAvg / FedProx / FedMix / FedData baselines."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClientDataset, Dataset
from .errors import AggregationError, ClientError, ConfigError, FleaError, ShapeError
from .local import (
    FeatureBuffer,
    FeatureRecord,
    LocalConfig,
    LocalResult,
    MixupParams,
    flea_local_train,
    rng_streams,
    sample_beta,
    train_loop,
)
from .metrics import ExposureMatrix, update_exposure
from .nn import Batch, ModelParams, forward_front, grad_total_loss, load_model, proximal_term, save_model

STRATEGIES = ("flea", "fedavg", "fedprox", "fedmix", "feddata")
POOL_KIND = {"fedmix": "batch_averages", "feddata": "raw_data"}


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_clients(num_clients: int, fraction: float, round_t: int, seed: int = 0) -> list[int]:
    """``ceil(fraction * num_clients)`` distinct ids, sorted, seeded by (seed, round)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"client fraction must be in (0, 1], got {fraction}")
    m = math.ceil(round(fraction * num_clients, 9))
    m = min(max(m, 1), num_clients)
    if m == num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng(_seed(seed, round_t, 101))
    return sorted(int(c) for c in rng.choice(num_clients, size=m, replace=False))


def aggregate_fedavg(models: Sequence[ModelParams], sizes: Sequence[int]) -> ModelParams:
    """Size-weighted parameter average."""
    if not models:
        raise AggregationError("nothing to aggregate")
    if len(models) != len(sizes):
        raise AggregationError(f"{len(models)} models but {len(sizes)} sizes")
    for k, (m, s) in enumerate(zip(models, sizes)):
        if not m.same_structure(models[0]):
            raise AggregationError(f"client index {k}: parameter shapes differ from client 0")
        if s < 1:
            raise AggregationError(f"client index {k}: size {s} < 1")
    sizes = np.asarray(sizes, dtype=float)
    weights = sizes / sizes.sum()
    total = weights[0] * models[0].flat()
    for w, m in zip(weights[1:], models[1:]):
        total = total + w * m.flat()
    return models[0].from_flat(total)


def extract_features(
    model: ModelParams,
    client: ClientDataset,
    dataset: Dataset,
    alpha: float,
    seed=0,
) -> list[FeatureRecord]:
    """Activations of a seeded ``alpha`` share of the client's data, one-hot labelled."""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    n = len(client)
    m = min(n, max(1, _half_up(alpha * n)))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    idx = client.indices[pick]
    acts = forward_front(model, dataset.inputs[idx])
    labels = dataset.onehot(idx)
    return [FeatureRecord(a, y, client.client_id, int(i)) for a, y, i in zip(acts, labels, idx)]


def merge_buffers(local_records: Sequence[Sequence[FeatureRecord]], round_t: int, seed=0) -> FeatureBuffer:
    """Concatenate per-client records into a shuffled buffer for ``round_t``."""
    records = [r for recs in local_records for r in recs]
    if not records:
        return FeatureBuffer.empty(round_t)
    widths = {len(r.activation) for r in records}
    if len(widths) > 1:
        raise ShapeError(f"records have mixed feature widths {sorted(widths)}")
    order = np.random.default_rng(seed).permutation(len(records))
    records = [records[i] for i in order]
    return FeatureBuffer(
        round_t,
        np.stack([r.activation for r in records]),
        np.stack([r.soft_label for r in records]),
        np.array([r.origin_client for r in records], dtype=np.int64),
        np.array([r.source_index for r in records], dtype=np.int64),
    )


@dataclass
class SharedPool:
    kind: str  # "raw_data" | "batch_averages"
    samples: np.ndarray
    labels: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)


def prepare_shared_pool(
    clients: Sequence[ClientDataset],
    dataset: Dataset,
    kind: str,
    seed=0,
    *,
    share: float = 0.1,
    group: int = 10,
) -> SharedPool:
    """Globally shared data for the FedData / FedMix baselines.

    ``raw_data`` takes a seeded ``share`` of every client's rows.
    ``batch_averages`` splits every client's rows into seeded groups of about
    ``group`` and keeps each group's mean input and mean one-hot label; a
    client with fewer than ``group`` rows contributes a single average.
    """
    if kind not in ("raw_data", "batch_averages"):
        raise ConfigError(f"unknown pool kind {kind!r}")
    rng = np.random.default_rng(seed)
    xs, ys, origins = [], [], []
    for client in clients:
        n = len(client)
        if kind == "raw_data":
            m = min(n, max(1, _half_up(share * n)))
            idx = client.indices[np.sort(rng.choice(n, size=m, replace=False))]
            xs.append(dataset.inputs[idx])
            ys.append(dataset.onehot(idx))
            origins.append(np.full(m, client.client_id))
        else:
            perm = client.indices[rng.permutation(n)]
            for chunk in np.array_split(perm, max(1, n // group)):
                xs.append(dataset.inputs[chunk].mean(axis=0, keepdims=True))
                ys.append(dataset.onehot(chunk).mean(axis=0, keepdims=True))
                origins.append(np.array([client.client_id]))
    return SharedPool(kind, np.concatenate(xs), np.concatenate(ys), np.concatenate(origins).astype(np.int64))


def baseline_local_train(
    strategy: str,
    init: ModelParams,
    snapshot: ModelParams,
    client: ClientDataset,
    dataset: Dataset,
    pool: SharedPool | None,
    cfg: LocalConfig,
    round_t: int,
    seed=0,
) -> LocalResult:
    strategy = strategy.lower()
    if strategy in POOL_KIND and pool is None:
        raise ConfigError(f"{strategy} needs a shared pool")
    if strategy not in ("fedavg", "fedprox", "fedmix", "feddata"):
        raise ConfigError(f"not a baseline strategy: {strategy!r}")
    x_all = dataset.inputs[client.indices]
    y_all = dataset.onehot(client.indices)
    if strategy == "feddata":
        foreign = pool.origins != client.client_id
        x_all = np.concatenate([x_all, pool.samples[foreign]])
        y_all = np.concatenate([y_all, pool.labels[foreign]])
    batch_rng, pool_rng, beta_rng = rng_streams(seed)
    mix = MixupParams(cfg.beta_a, beta_rng)

    def step(params, idx):
        x, y = x_all[idx], y_all[idx]
        if strategy == "fedmix":
            j = pool_rng.integers(0, len(pool), size=len(idx))
            b = sample_beta(mix, len(idx))[:, None]
            x = b * x + (1 - b) * pool.samples[j]
            y = b * y + (1 - b) * pool.labels[j]
        loss, grads, terms = grad_total_loss(params, None, Batch(x, y))
        if strategy == "fedprox":
            prox, g_prox = proximal_term(params, snapshot, cfg.prox_rho)
            loss += prox
            grads = grads.flat() + g_prox
            terms = {**terms, "total": loss}
        return loss, grads, terms

    return train_loop(init, len(x_all), cfg, round_t, batch_rng, step)


@dataclass
class FedConfig:
    strategy: str = "flea"
    client_fraction: float = 0.1
    alpha: float = 0.1
    local: LocalConfig = field(default_factory=LocalConfig)
    seed: int = 0
    threads: int = 1
    exposure_symmetric: bool = True

    def __post_init__(self):
        if self.strategy.lower() not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        self.strategy = self.strategy.lower()


@dataclass
class RoundState:
    model: ModelParams
    round: int
    buffer: FeatureBuffer
    exposure: ExposureMatrix
    pool: SharedPool | None = None
    comm: dict = field(default_factory=lambda: {"model_down": 0, "model_up": 0, "features_up": 0, "features_down": 0})

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round must be >= 1")


@dataclass
class RoundOutcome:
    round: int
    cohort: list[int]
    losses: dict
    buffer_size: int


def init_state(
    model: ModelParams,
    clients: Sequence[ClientDataset],
    dataset: Dataset,
    cfg: FedConfig,
) -> RoundState:
    """Round-1 state; FedMix / FedData gather their pool from every client here."""
    pool = None
    if cfg.strategy in POOL_KIND:
        pool = prepare_shared_pool(clients, dataset, POOL_KIND[cfg.strategy], _seed(cfg.seed, 0, 202))
    buffer = FeatureBuffer.empty(1, model.feature_width, model.num_classes)
    return RoundState(model, 1, buffer, ExposureMatrix(len(clients)), pool)


def _client_seed(cfg: FedConfig, round_t: int, cid: int, tag: int = 1) -> np.random.SeedSequence:
    return _seed(cfg.seed, round_t, cid, tag)


def run_round(
    state: RoundState,
    clients: Sequence[ClientDataset],
    dataset: Dataset,
    cfg: FedConfig,
    *,
    cohort: Sequence[int] | None = None,
) -> tuple[RoundState, RoundOutcome]:
    """One communication round; returns the next state and what happened.

    ``cohort`` forces the participating clients (scripted schedules);
    otherwise they are sampled from (seed, round).
    """
    t = state.round
    if cohort is None:
        cohort = sample_clients(len(clients), cfg.client_fraction, t, cfg.seed)
    cohort = list(cohort)
    snapshot = state.model
    strategy = cfg.strategy

    exposure = state.exposure
    if strategy == "flea" and t > 1:
        exposure = update_exposure(
            exposure, state.buffer.contributors, cohort, symmetric=cfg.exposure_symmetric
        )
    elif strategy in POOL_KIND and t == 1:
        exposure = exposure.fill()

    def work(cid: int) -> LocalResult:
        try:
            if strategy == "flea":
                buffer = state.buffer if t > 1 else None
                return flea_local_train(snapshot, snapshot, clients[cid], dataset, buffer, cfg.local, t, _client_seed(cfg, t, cid))
            return baseline_local_train(
                strategy, snapshot, snapshot, clients[cid], dataset, state.pool, cfg.local, t, _client_seed(cfg, t, cid)
            )
        except FleaError as exc:
            raise ClientError(f"round {t}, client {cid}: {exc}") from exc
        except (ValueError, ArithmeticError) as exc:
            raise ClientError(f"round {t}, client {cid}: {exc}") from exc

    if cfg.threads > 1 and len(cohort) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, cohort))
    else:
        results = [work(cid) for cid in cohort]

    new_model = aggregate_fedavg([r.params for r in results], [len(clients[c]) for c in cohort])
    if not new_model.is_finite():
        raise ClientError(f"round {t}: aggregated model is not finite")

    comm = dict(state.comm)
    comm["model_down"] += len(cohort)
    comm["model_up"] += len(cohort)
    comm["features_down"] += len(state.buffer) * len(cohort) if strategy == "flea" and t > 1 else 0

    if strategy == "flea":
        records = [
            extract_features(new_model, clients[cid], dataset, cfg.alpha, _client_seed(cfg, t, cid, 2))
            for cid in cohort
        ]
        buffer = merge_buffers(records, t + 1, _seed(cfg.seed, t, 303))
        comm["model_down"] += len(cohort)  # extraction needs the new global model
        comm["features_up"] += len(buffer)
    else:
        buffer = FeatureBuffer.empty(t + 1, new_model.feature_width, new_model.num_classes)

    losses = {}
    for key in ("clf", "dis", "dec", "total"):
        vals = [r.mean_terms().get(key, 0.0) for r in results]
        losses[key] = float(np.mean(vals))

    new_state = RoundState(new_model, t + 1, buffer, exposure, state.pool, comm)
    return new_state, RoundOutcome(t, cohort, losses, len(buffer))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: RoundState, directory: str | Path) -> Path:
    """Write model, buffer and exposure of ``state`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(state.model, d / "model")
    buf = state.buffer
    (d / "buffer_features.bin").write_bytes(buf.features.astype("<f8").tobytes())
    (d / "buffer_labels.bin").write_bytes(buf.labels.astype("<f8").tobytes())
    manifest = {
        "round": state.round,
        "buffer": {
            "round": buf.round,
            "size": len(buf),
            "width": int(buf.features.shape[1]),
            "num_classes": int(buf.labels.shape[1]),
            "origins": buf.origins.tolist(),
            "source_indices": buf.source_indices.tolist(),
        },
        "exposure": np.flatnonzero(state.exposure.xi.ravel()).tolist(),
        "num_clients": state.exposure.num_clients,
        "comm": state.comm,
        "pool": None,
    }
    if state.pool is not None:
        (d / "pool_samples.bin").write_bytes(state.pool.samples.astype("<f8").tobytes())
        (d / "pool_labels.bin").write_bytes(state.pool.labels.astype("<f8").tobytes())
        manifest["pool"] = {
            "kind": state.pool.kind,
            "shape": list(state.pool.samples.shape),
            "label_width": int(state.pool.labels.shape[1]),
            "origins": state.pool.origins.tolist(),
        }
    (d / "manifest.json").write_text(json.dumps(manifest))
    return d


def load_checkpoint(directory: str | Path) -> RoundState:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = load_model(d / "model")
    b = manifest["buffer"]

    def arr(name, shape):
        return np.frombuffer((d / name).read_bytes(), dtype="<f8").astype(float).reshape(shape)

    buffer = FeatureBuffer(
        b["round"],
        arr("buffer_features.bin", (b["size"], b["width"])),
        arr("buffer_labels.bin", (b["size"], b["num_classes"])),
        np.array(b["origins"], dtype=np.int64),
        np.array(b["source_indices"], dtype=np.int64),
    )
    exposure = ExposureMatrix(manifest["num_clients"])
    exposure.xi.flat[manifest["exposure"]] = True
    pool = None
    if manifest["pool"] is not None:
        p = manifest["pool"]
        pool = SharedPool(
            p["kind"],
            arr("pool_samples.bin", tuple(p["shape"])),
            arr("pool_labels.bin", (p["shape"][0], p["label_width"])),
            np.array(p["origins"], dtype=np.int64),
        )
    return RoundState(model, manifest["round"], buffer, exposure, pool, manifest["comm"])
