"""Synthetic data, CSV ingestion and client partitioning (IID, Qua(q), Dir(mu))."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, PartitionError


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    context_flags: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.context_flags is not None:
            self.context_flags = np.asarray(self.context_flags, dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]

    def onehot(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.eye(self.num_classes)[labels]

    def subset(self, idx) -> "Dataset":
        flags = None if self.context_flags is None else self.context_flags[idx]
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, flags)


@dataclass
class ClientDataset:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class PartitionSpec:
    mode: str  # "iid" | "qua" | "dir"
    num_clients: int
    mean_size: int | None = None
    q: int = 2
    mu: float = 0.5
    seed: int = 0

    def validate(self, dataset: Dataset) -> int:
        mode = self.mode.lower()
        if mode not in ("iid", "qua", "dir"):
            raise PartitionError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if mode == "qua" and not 1 <= self.q <= dataset.num_classes:
            raise PartitionError(f"q={self.q} outside [1, {dataset.num_classes}]")
        if mode == "dir" and not self.mu > 0:
            raise PartitionError(f"mu must be positive, got {self.mu}")
        size = self.mean_size if self.mean_size is not None else len(dataset) // self.num_clients
        if size < 1:
            raise PartitionError("mean client size must be >= 1")
        if size * self.num_clients > len(dataset):
            raise PartitionError(
                f"{self.num_clients} clients x {size} samples exceeds {len(dataset)} rows"
            )
        return size


def class_means(num_classes: int, dims: int, scale: float = 1.0) -> np.ndarray:
    """Deterministic class centres: simplex vertices if dims >= C, else a circle."""
    means = np.zeros((num_classes, dims))
    if dims >= num_classes:
        means[:, :num_classes] = np.eye(num_classes)
    else:
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0], means[:, 1] = np.cos(angles), np.sin(angles)
    return scale * means


def gen_gaussian_mixture(
    num_classes: int,
    dims: int,
    per_class: int,
    spread: float,
    seed: int = 0,
    *,
    scale: float = 1.0,
    modes: int = 1,
    nuisance_dims: int = 0,
    nuisance_scale: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian clusters, ``per_class`` rows each, ordered by class.

    With ``modes=2`` every class is split between its centre and the mirrored
    centre (sign drawn per row), so class means collapse to the origin and
    averaging rows of one class destroys the class signal.

    ``nuisance_dims`` extra columns of N(0, nuisance_scale^2) noise are
    appended after the ``dims`` class-bearing columns.
    """
    if num_classes < 2 or dims < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2, dims >= 2, per_class >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    if modes not in (1, 2):
        raise ValueError(f"modes must be 1 or 2, got {modes}")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dims, scale)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = spread * rng.standard_normal((len(labels), dims))
    centres = means[labels]
    if modes == 2:
        centres = centres * rng.choice([-1.0, 1.0], size=(len(labels), 1))
    inputs = centres + noise
    if nuisance_dims:
        inputs = np.hstack([inputs, nuisance_scale * rng.standard_normal((len(labels), nuisance_dims))])
    return Dataset(inputs, labels, num_classes)


# -- partitioning ----------------------------------------------------------

def _class_pools(dataset: Dataset, rng) -> list[list[int]]:
    return [list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(dataset.num_classes)]


def _split_even(total: int, parts: int, rotate: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + ((j - rotate) % parts < extra) for j in range(parts)]


def _largest_remainder(weights: np.ndarray, total: int, rotate: int = 0) -> np.ndarray:
    raw = weights / weights.sum() * total
    out = np.floor(raw + 1e-9).astype(int)
    short = total - out.sum()
    ties = (np.arange(len(weights)) - rotate) % len(weights)
    order = np.lexsort((ties, -np.round(raw - out, 9)))
    out[order[:short]] += 1
    return out


def _partition_iid(dataset, spec, size, rng):
    pools = _class_pools(dataset, rng)
    freq = np.array([len(p) for p in pools], dtype=float)
    shards = []
    for k in range(spec.num_clients):
        # rotating tie-break spreads the +1 remainders evenly over classes
        quotas = _largest_remainder(freq, size, rotate=k * size)
        shard = []
        for c, n in enumerate(quotas):
            if n > len(pools[c]):
                raise PartitionError(f"class {c} exhausted: client {k} needs {n}, {len(pools[c])} left")
            shard.extend(pools[c][:n])
            del pools[c][:n]
        shards.append(shard)
    return shards


def _partition_qua(dataset, spec, size, rng):
    C = dataset.num_classes
    pools = _class_pools(dataset, rng)
    usage = np.zeros(C, dtype=int)
    tiebreak = rng.permutation(C)
    shards = []
    for k in range(spec.num_clients):
        order = sorted(range(C), key=lambda c: (usage[c], (tiebreak[c] + k) % C))
        classes = sorted(order[: spec.q])
        usage[classes] += 1
        counts = _split_even(size, spec.q, k)
        shard = []
        for c, n in zip(classes, counts):
            if n > len(pools[c]):
                raise PartitionError(
                    f"class {c} exhausted: client {k} needs {n}, {len(pools[c])} left"
                )
            shard.extend(pools[c][:n])
            del pools[c][:n]
        shards.append(shard)
    return shards


def _partition_dir(dataset, spec, size, rng):
    C, K = dataset.num_classes, spec.num_clients
    total = size * K
    # stratified subsample of exactly `total` rows, then split per class
    base = _partition_iid(dataset, PartitionSpec("iid", 1, total), total, rng)[0]
    base = np.asarray(base)
    per_class = [list(rng.permutation(base[dataset.labels[base] == c])) for c in range(C)]
    for _ in range(100):
        props = rng.dirichlet(np.full(C, spec.mu), size=K)
        shards: list[list[int]] = [[] for _ in range(K)]
        leftovers: list[int] = []
        for c in range(C):
            col = props[:, c]
            if col.sum() <= 0:
                leftovers.extend(per_class[c])
                continue
            quotas = _largest_remainder(col, len(per_class[c]))
            pos = 0
            for k in range(K):
                shards[k].extend(per_class[c][pos : pos + quotas[k]])
                pos += quotas[k]
        for idx in leftovers:
            k = min(range(K), key=lambda j: (len(shards[j]), j))
            shards[k].append(idx)
        if all(shards):
            return shards
    raise PartitionError("Dir partition left a client empty after 100 draws")


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split ``dataset`` into disjoint client index sets."""
    size = spec.validate(dataset)
    rng = np.random.default_rng(spec.seed)
    mode = spec.mode.lower()
    if mode == "iid":
        shards = _partition_iid(dataset, spec, size, rng)
    elif mode == "qua":
        shards = _partition_qua(dataset, spec, size, rng)
    else:
        shards = _partition_dir(dataset, spec, size, rng)
    return [ClientDataset(k, np.sort(np.asarray(s, dtype=np.int64))) for k, s in enumerate(shards)]


def manifest(clients: Sequence[ClientDataset], spec: PartitionSpec | None = None) -> dict:
    out = {"clients": {str(c.client_id): c.indices.tolist() for c in clients}}
    if spec is not None:
        out["spec"] = {
            "mode": spec.mode,
            "num_clients": spec.num_clients,
            "mean_size": spec.mean_size,
            "q": spec.q,
            "mu": spec.mu,
            "seed": spec.seed,
        }
    return out


def write_manifest(path, clients, spec=None) -> None:
    Path(path).write_text(json.dumps(manifest(clients, spec)))


def read_manifest(path) -> list[ClientDataset]:
    data = json.loads(Path(path).read_text())
    return [ClientDataset(int(k), v) for k, v in sorted(data["clients"].items(), key=lambda kv: int(kv[0]))]


# -- CSV -------------------------------------------------------------------

def load_csv(path, label: str, features: Sequence[str] | None = None) -> Dataset:
    """Read a headed CSV; ``label`` names the class column.

    Feature columns default to every other column. Labels are re-indexed
    densely in sorted order of their original values.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if label not in header:
            raise ParseError(f"{path}: no label column {label!r} in header {header}")
        feats = list(features) if features is not None else [h for h in header if h != label]
        missing = [f for f in feats if f not in header]
        if missing:
            raise ParseError(f"{path}: unknown feature columns {missing}")
        li = header.index(label)
        fi = [header.index(f) for f in feats]
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in fi])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            raw_labels.append(row[li].strip())
    if not rows:
        raise ParseError(f"{path}: no data rows")
    try:
        keys = sorted(set(raw_labels), key=float)
    except ValueError:
        keys = sorted(set(raw_labels))
    index = {k: i for i, k in enumerate(keys)}
    return Dataset(np.array(rows), np.array([index[v] for v in raw_labels]), len(keys))


def write_csv(dataset: Dataset, path, label: str = "label") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.dims)] + [label])
        for row, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


# -- context marker ----------------------------------------------------------

def add_context_marker(
    dataset: Dataset,
    marker: Sequence[float],
    fraction: float,
    seed: int = 0,
    *,
    offset: int = 0,
) -> Dataset:
    """Add ``marker`` to coordinates ``[offset, offset+len(marker))`` of a seeded
    ``fraction`` of rows and flag those rows."""
    marker = np.asarray(marker, dtype=float)
    if offset + len(marker) > dataset.dims:
        raise ValueError(f"marker of length {len(marker)} at {offset} exceeds {dataset.dims} dims")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=int(round(fraction * n)), replace=False)
    flags = np.zeros(n, dtype=bool)
    flags[chosen] = True
    inputs = dataset.inputs.copy()
    inputs[flags, offset : offset + len(marker)] += marker
    return Dataset(inputs, dataset.labels.copy(), dataset.num_classes, flags)
