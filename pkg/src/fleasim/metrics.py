"""Evaluation metrics, feature-exposure accounting and the per-round metrics sink."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Dataset
from .losses import distance_correlation
from .nn import ModelParams, forward, forward_front


def accuracy(model: ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("accuracy on an empty dataset")
    pred = forward(model, test.inputs).argmax(axis=1)
    return float(np.mean(pred == test.labels))


def db_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index using class labels as clusters (lower is better).

    Scatter is the mean Euclidean distance of members to their centroid.
    Cluster pairs with coincident centroids are left out of the max.
    """
    features = np.asarray(features, dtype=float).reshape(len(features), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("db_score needs at least 2 clusters")
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    scatter = np.array(
        [np.linalg.norm(features[labels == c] - centroids[i], axis=1).mean() for i, c in enumerate(classes)]
    )
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / dist
    ratio[~np.isfinite(ratio) | (dist == 0)] = 0.0
    np.fill_diagonal(ratio, 0.0)
    return float(ratio.max(axis=1).mean())


def batched_dcor(inputs: np.ndarray, features: np.ndarray, batch_size: int, seed: int = 0) -> float:
    """Mean distance correlation over seeded batches covering the rows once.

    A trailing batch with fewer than 2 rows is dropped.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("mean distance correlation of an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    values = [
        distance_correlation(inputs[idx], features[idx])
        for idx in (order[s : s + batch_size] for s in range(0, n, batch_size))
        if len(idx) >= 2
    ]
    return float(np.mean(values)) if values else 0.0


def mean_dcor(model: ModelParams, data: Dataset, batch_size: int = 32, seed: int = 0) -> float:
    return batched_dcor(data.inputs, forward_front(model, data.inputs), batch_size, seed)


class ExposureMatrix:
    """Symmetric record of which client pairs have exchanged features."""

    def __init__(self, num_clients: int):
        self.xi = np.zeros((num_clients, num_clients), dtype=bool)

    @property
    def num_clients(self) -> int:
        return self.xi.shape[0]

    def copy(self) -> "ExposureMatrix":
        out = ExposureMatrix(self.num_clients)
        out.xi = self.xi.copy()
        return out

    def fill(self) -> "ExposureMatrix":
        """Everyone has seen everyone (data pooled and broadcast to all)."""
        out = self.copy()
        out.xi[:] = True
        np.fill_diagonal(out.xi, False)
        return out


def update_exposure(
    xi: ExposureMatrix,
    senders: Iterable[int],
    receivers: Iterable[int],
    *,
    symmetric: bool = True,
) -> ExposureMatrix:
    """Mark every (sender, receiver) pair as exposed.

    With ``symmetric=False`` only ``xi[sender, receiver]`` is set, i.e. the
    matrix records who has seen whose features rather than who has met.
    """
    senders, receivers = list(senders), list(receivers)
    for cid in senders + receivers:
        if not 0 <= cid < xi.num_clients:
            raise IndexError(f"client id {cid} outside [0, {xi.num_clients})")
    out = xi.copy()
    for i in senders:
        for j in receivers:
            if i != j:
                out.xi[i, j] = True
                if symmetric:
                    out.xi[j, i] = True
    return out


def exposure_eps(xi: ExposureMatrix) -> float:
    k = xi.num_clients
    return float(xi.xi.sum()) / (k * k) if k else 0.0


@dataclass
class MetricsRecord:
    round: int
    strategy: str
    seed: int
    accuracy: float
    best_accuracy: float
    loss_clf: float
    loss_dis: float
    loss_dec: float
    db_train: float
    db_test: float
    mean_dcor: float
    exposure_eps: float
    wallclock_ms: float

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round must be >= 1")


COLUMNS = [f.name for f in fields(MetricsRecord)]


class MetricsSink:
    """Appends records to ``metrics.csv`` and ``metrics.jsonl`` in ``directory``."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.directory / "metrics.csv"
        self.jsonl_path = self.directory / "metrics.jsonl"
        self._csv = self.csv_path.open("w", newline="", encoding="utf-8")
        self._jsonl = self.jsonl_path.open("w", encoding="utf-8")
        self._writer = csv.writer(self._csv, lineterminator="\n")
        self._writer.writerow(COLUMNS)
        self._csv.flush()

    def close(self) -> None:
        self._csv.close()
        self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(sink: MetricsSink, record: MetricsRecord) -> None:
    row = asdict(record)
    sink._writer.writerow([_fmt(row[c]) for c in COLUMNS])
    sink._jsonl.write(json.dumps(row) + "\n")
    sink._csv.flush()
    sink._jsonl.flush()


def _fmt(value):
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return value


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(_coerce(row))
    return out


def read_metrics_jsonl(path) -> list[MetricsRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [_coerce(json.loads(line)) for line in lines if line.strip()]


def _coerce(row: dict) -> MetricsRecord:
    kw = {}
    for f in fields(MetricsRecord):
        v = row[f.name]
        kw[f.name] = int(v) if f.type in ("int", int) else (str(v) if f.type in ("str", str) else float(v))
    return MetricsRecord(**kw)
