"""Slow, explicit-loop reference implementations used as independent oracles.

Nothing here imports from the package: each oracle is written from the
textbook definition with plain Python loops.
"""
import math

import numpy as np


def dcor_loops(x, f):
    """Distance correlation from the definition with squared distances.

    Builds both distance matrices element by element, double-centres with
    explicit row/column/grand means and evaluates the normalised cross term.
    """
    x = [list(map(float, row)) for row in np.asarray(x).reshape(len(x), -1)]
    f = [list(map(float, row)) for row in np.asarray(f).reshape(len(f), -1)]
    n = len(x)

    def dist(rows):
        return [[sum((a - b) ** 2 for a, b in zip(rows[i], rows[k])) for k in range(n)] for i in range(n)]

    def centre(E):
        row = [sum(E[i]) / n for i in range(n)]
        col = [sum(E[i][k] for i in range(n)) / n for k in range(n)]
        grand = sum(row) / n
        return [[E[i][k] - row[i] - col[k] + grand for k in range(n)] for i in range(n)]

    A, B = centre(dist(x)), centre(dist(f))

    def nu2(P, Q):
        return sum(P[i][k] * Q[i][k] for i in range(n) for k in range(n)) / (n * n)

    vxx, vff = nu2(A, A), nu2(B, B)
    if vxx <= 0 or vff <= 0:
        return 0.0
    return nu2(A, B) / math.sqrt(vxx * vff)


def double_center_loops(E):
    E = np.asarray(E, dtype=float)
    n = E.shape[0]
    out = np.zeros_like(E)
    grand = sum(E[i, k] for i in range(n) for k in range(n)) / (n * n)
    for i in range(n):
        rowmean = sum(E[i, k] for k in range(n)) / n
        for k in range(n):
            colmean = sum(E[j, k] for j in range(n)) / n
            out[i, k] = E[i, k] - rowmean - colmean + grand
    return out


def db_loops(points, labels):
    """Davies-Bouldin: mean over clusters of max_j (s_i + s_j) / d(c_i, c_j)."""
    points = np.asarray(points, dtype=float)
    clusters = sorted(set(int(l) for l in labels))
    cent, scat = {}, {}
    for c in clusters:
        members = [points[i] for i in range(len(points)) if labels[i] == c]
        centroid = [sum(m[d] for m in members) / len(members) for d in range(points.shape[1])]
        cent[c] = centroid
        scat[c] = sum(math.dist(m, centroid) for m in members) / len(members)
    total = 0.0
    for i in clusters:
        worst = 0.0
        for j in clusters:
            if i == j:
                continue
            d = math.dist(cent[i], cent[j])
            if d == 0:
                continue
            worst = max(worst, (scat[i] + scat[j]) / d)
        total += worst
    return total / len(clusters)


def cross_entropy_loops(logits, labels):
    total = 0.0
    for z, y in zip(logits, labels):
        m = max(z)
        norm = m + math.log(sum(math.exp(v - m) for v in z))
        total += sum(-yc * (zc - norm) for zc, yc in zip(z, y))
    return total / len(logits)


def kl_loops(local, glob):
    total = 0.0
    for zl, zg in zip(local, glob):
        pl = [math.exp(v) / sum(math.exp(u) for u in zl) for v in zl]
        pg = [math.exp(v) / sum(math.exp(u) for u in zg) for v in zg]
        total += sum(-a * math.log(b / a) for a, b in zip(pl, pg))
    return total / len(local)


def mlp_forward_loops(layers, x):
    """Straight-line dense forward pass; ``layers`` = [(W, b, activation), ...]."""
    out = []
    for row in np.asarray(x, dtype=float):
        h = list(row)
        for W, b, act in layers:
            nxt = []
            for j in range(W.shape[1]):
                a = b[j] + sum(h[i] * W[i, j] for i in range(W.shape[0]))
                nxt.append(math.tanh(a) if act == "tanh" else a)
            h = nxt
        out.append(h)
    return np.array(out)


def adam_scalar(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        traj.append(theta)
    return traj


def fedavg_loops(vectors, sizes):
    total = sum(sizes)
    return [sum(s / total * v[i] for v, s in zip(vectors, sizes)) for i in range(len(vectors[0]))]


def finite_difference(fn, vec, step=1e-5):
    vec = np.array(vec, dtype=float)
    grad = np.zeros_like(vec)
    for i in range(len(vec)):
        up, down = vec.copy(), vec.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (fn(up) - fn(down)) / (2 * step)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
