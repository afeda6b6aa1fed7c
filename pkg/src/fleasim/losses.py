"""Loss terms used in local training: soft-label cross-entropy, distillation
KL and the distance-correlation de-correlation statistic.

Each value function has a companion that also returns the gradient with
respect to its differentiable argument; the network module chains these
through backprop.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "softmax",
    "log_softmax",
    "loss_clf",
    "loss_dis",
    "double_center",
    "sq_distance_matrix",
    "distance_correlation",
    "clf_with_grad",
    "dis_with_grad",
    "dcor_with_grad",
]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def loss_clf(logits: np.ndarray, soft_labels: np.ndarray) -> float:
    """Mean soft-label cross-entropy."""
    return clf_with_grad(logits, soft_labels)[0]


def clf_with_grad(logits, soft_labels):
    logits = np.asarray(logits, dtype=float)
    soft_labels = np.asarray(soft_labels, dtype=float)
    if logits.shape != soft_labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {soft_labels.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    value = float(-(soft_labels * logp).sum() / n)
    # d/dz of -sum y log p is p * sum(y) - y; labels need not be normalised here
    grad = (np.exp(logp) * soft_labels.sum(axis=1, keepdims=True) - soft_labels) / n
    return value, grad


def loss_dis(local_logits: np.ndarray, global_logits: np.ndarray) -> float:
    """Mean KL(p_local || p_global) over the batch."""
    return dis_with_grad(local_logits, global_logits)[0]


def dis_with_grad(local_logits, global_logits):
    """Return (mean KL, d/d local_logits, d/d global_logits)."""
    local_logits = np.asarray(local_logits, dtype=float)
    global_logits = np.asarray(global_logits, dtype=float)
    if local_logits.shape != global_logits.shape:
        raise ValueError(f"logit shapes differ: {local_logits.shape} vs {global_logits.shape}")
    n = local_logits.shape[0]
    logp = log_softmax(local_logits)
    logq = log_softmax(global_logits)
    p = np.exp(logp)
    q = np.exp(logq)
    diff = logp - logq
    rows = (p * diff).sum(axis=1)
    value = float(max(rows.sum() / n, 0.0))
    g_local = p * (diff - rows[:, None]) / n
    g_global = (q - p) / n
    return value, g_local, g_global


def double_center(E: np.ndarray) -> np.ndarray:
    """Return C E C with C = I - J/n, computed from row/column means."""
    E = np.asarray(E, dtype=float)
    if E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ValueError(f"double_center needs a square matrix, got {E.shape}")
    if E.shape[0] == 0:
        raise ValueError("double_center of an empty matrix")
    return E - E.mean(axis=1, keepdims=True) - E.mean(axis=0, keepdims=True) + E.mean()


def sq_distance_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def _dcor_parts(x, f):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    f = np.asarray(f, dtype=float).reshape(len(f), -1)
    if x.shape[0] != f.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {f.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("distance correlation needs at least 2 rows")
    n = x.shape[0]
    A = double_center(sq_distance_matrix(x))
    B = double_center(sq_distance_matrix(f))
    vxf = (A * B).sum() / n**2
    vxx = (A * A).sum() / n**2
    vff = (B * B).sum() / n**2
    return n, f, A, B, vxf, vxx, vff


def distance_correlation(
    x_batch: np.ndarray,
    f_batch: np.ndarray,
    *,
    clamp: bool = True,
) -> float:
    """Distance correlation between two equally sized batches.

    Pairwise distances are squared Euclidean. A batch with zero
    distance variance (all rows equal) yields 0.
    """
    _, _, _, _, vxf, vxx, vff = _dcor_parts(x_batch, f_batch)
    if vxx <= 0.0 or vff <= 0.0:
        return 0.0
    c = float(vxf / np.sqrt(vxx * vff))
    return min(max(c, 0.0), 1.0) if clamp else c


def dcor_with_grad(x_batch, f_batch):
    """Unclamped distance correlation and its gradient w.r.t. ``f_batch``."""
    n, f, A, B, vxf, vxx, vff = _dcor_parts(x_batch, f_batch)
    if vxx <= 0.0 or vff <= 0.0:
        return 0.0, np.zeros_like(f)
    denom = np.sqrt(vxx * vff)
    c = vxf / denom
    dB = (A / denom - (c / vff) * B) / n**2
    H = double_center(dB)
    grad = 4.0 * (H.sum(axis=1)[:, None] * f - H @ f)
    return float(c), grad
