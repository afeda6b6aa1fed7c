"""Split multilayer perceptron with exact gradients and a scheduled Adam.

A model is a stack of dense layers cut at ``split_index``: the layers
before the cut form the feature extractor whose output is what clients
share, the rest map (possibly mixed) features to logits.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import NumericalError, ShapeError
from .losses import clf_with_grad, dcor_with_grad, dis_with_grad

ACTIVATIONS = ("tanh", "relu", "linear")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "tanh"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    layers: list[Layer]
    split_index: int
    num_classes: int

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ShapeError("a split model needs at least two layers")
        if not 1 <= self.split_index <= len(self.layers) - 1:
            raise ShapeError(
                f"split_index {self.split_index} outside [1, {len(self.layers) - 1}]"
            )
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.fan_out,):
                raise ShapeError(
                    f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape} mismatch"
                )
            if i and self.layers[i - 1].fan_out != layer.fan_in:
                raise ShapeError(
                    f"layer {i} expects width {layer.fan_in}, previous layer gives "
                    f"{self.layers[i - 1].fan_out}"
                )
        if self.layers[-1].fan_out != self.num_classes:
            raise ShapeError(
                f"output width {self.layers[-1].fan_out} != num_classes {self.num_classes}"
            )

    @property
    def input_width(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_width(self) -> int:
        return self.layers[self.split_index].fan_in

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        """New model with this structure and parameters taken from ``vec``."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({self.num_params},)")
        layers, pos = [], 0
        for layer in self.layers:
            w = vec[pos : pos + layer.weight.size].reshape(layer.weight.shape)
            pos += layer.weight.size
            b = vec[pos : pos + layer.bias.size].copy()
            pos += layer.bias.size
            layers.append(Layer(w.copy(), b, layer.activation))
        return replace(self, layers=layers)

    def copy(self) -> "ModelParams":
        return self.from_flat(self.flat())

    def zeros_like(self) -> "ModelParams":
        return self.from_flat(np.zeros(self.num_params))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def same_structure(self, other: "ModelParams") -> bool:
        return (
            self.split_index == other.split_index
            and self.num_classes == other.num_classes
            and [(l.weight.shape, l.activation) for l in self.layers]
            == [(l.weight.shape, l.activation) for l in other.layers]
        )


def init_model(
    widths: Sequence[int],
    split_index: int,
    *,
    activation: str = "tanh",
    seed: int | np.random.Generator = 0,
) -> ModelParams:
    """Glorot-uniform MLP; hidden layers use ``activation``, the output is linear.

    ``widths`` runs from the input width to the number of classes.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = "linear" if i == len(widths) - 2 else activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return ModelParams(layers, split_index, int(widths[-1]))


def _act(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(kind: str, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return grad * (1.0 - out * out)
    if kind == "relu":
        return grad * (out > 0.0)
    return grad


def _run(layers: Sequence[Layer], h: np.ndarray):
    cache = []
    for layer in layers:
        out = _act(layer.activation, h @ layer.weight + layer.bias)
        cache.append((h, out))
        h = out
    return h, cache


def _backprop(layers, cache, grad, sink: list | None):
    """Push ``grad`` back through ``layers``; writes (dW, db) into ``sink`` if given."""
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        h_in, out = cache[k]
        da = _act_grad(layer.activation, out, grad)
        if sink is not None:
            sink[k] = (h_in.T @ da, da.sum(axis=0))
        grad = da @ layer.weight.T
    return grad


def _as_matrix(x, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: got shape {x.shape}, expected (n, {width})")
    return x


def forward_front(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    x = _as_matrix(inputs, model.input_width, "forward_front input")
    return _run(model.layers[: model.split_index], x)[0]


def forward_back(model: ModelParams, activations: np.ndarray) -> np.ndarray:
    f = _as_matrix(activations, model.feature_width, "forward_back activations")
    return _run(model.layers[model.split_index :], f)[0]


def forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    x = _as_matrix(inputs, model.input_width, "forward input")
    return _run(model.layers, x)[0]


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray  # soft labels, rows sum to 1

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if np.any(self.labels < 0) or not np.allclose(self.labels.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("batch label rows must be non-negative and sum to 1")

    def __len__(self) -> int:
        return self.inputs.shape[0]


class LossEval(NamedTuple):
    loss: float
    grads: ModelParams
    terms: dict


@np.errstate(over="ignore", invalid="ignore")  # reported as NumericalError below
def grad_total_loss(
    model: ModelParams,
    global_snapshot: ModelParams | None,
    batch: Batch,
    buffer_batch: tuple[np.ndarray, np.ndarray] | None = None,
    betas: np.ndarray | None = None,
    lambda1: float = 0.0,
    lambda2: float = 0.0,
) -> LossEval:
    """Classification + lambda1 * distillation + lambda2 * de-correlation.

    ``buffer_batch`` is a (features, soft_labels) pair drawn from the shared
    buffer, one row per batch row; when present, local features are mixed
    with it using ``betas`` before entering the back half. Without it the
    back half sees the raw local features. Distillation is skipped when
    ``lambda1 == 0`` or no snapshot is given; the de-correlation term is
    always taken on (raw inputs, raw local features).
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    x, y = batch.inputs, batch.labels
    n = len(batch)
    front = model.layers[: model.split_index]
    back = model.layers[model.split_index :]
    f, front_cache = _run(front, _as_matrix(x, model.input_width, "batch inputs"))

    if buffer_batch is not None:
        buf_f, buf_y = (np.asarray(a, dtype=float) for a in buffer_batch)
        if buf_f.shape != f.shape:
            raise ShapeError(f"buffer features {buf_f.shape} vs local features {f.shape}")
        if buf_y.shape != y.shape:
            raise ShapeError(f"buffer labels {buf_y.shape} vs local labels {y.shape}")
        if betas is None or np.shape(betas) != (n,):
            raise ShapeError(f"need one beta per row ({n}), got {np.shape(betas)}")
        b = np.asarray(betas, dtype=float)[:, None]
        mixed_f = b * f + (1.0 - b) * buf_f
        mixed_y = b * y + (1.0 - b) * buf_y
    else:
        b = None
        mixed_f, mixed_y = f, y

    z_local, back_cache = _run(back, mixed_f)
    clf, g_z = clf_with_grad(z_local, mixed_y)
    terms = {"clf": clf, "dis": 0.0, "dec": 0.0}
    g_mixed = np.zeros_like(mixed_f)

    if lambda1 > 0 and global_snapshot is not None:
        if not global_snapshot.same_structure(model):
            raise ShapeError("global snapshot structure differs from the local model")
        g_layers = global_snapshot.layers[global_snapshot.split_index :]
        z_global, g_cache = _run(g_layers, mixed_f)
        dis, g_zl, g_zg = dis_with_grad(z_local, z_global)
        terms["dis"] = dis
        g_z = g_z + lambda1 * g_zl
        # snapshot parameters are frozen; only the path into the features counts
        g_mixed += _backprop(g_layers, g_cache, lambda1 * g_zg, None)

    back_sink: list = [None] * len(back)
    g_mixed += _backprop(back, back_cache, g_z, back_sink)
    g_f = g_mixed * b if b is not None else g_mixed

    if lambda2 > 0 and n >= 2:
        dec, g_dec = dcor_with_grad(x, f)
        terms["dec"] = dec
        g_f = g_f + lambda2 * g_dec

    front_sink: list = [None] * len(front)
    _backprop(front, front_cache, g_f, front_sink)

    total = clf + lambda1 * terms["dis"] + lambda2 * terms["dec"]
    for name, value in (("clf", clf), ("dis", terms["dis"]), ("dec", terms["dec"])):
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {name} loss term")
    terms["total"] = total
    grads = ModelParams(
        [Layer(dw, db, l.activation) for (dw, db), l in zip(front_sink + back_sink, model.layers)],
        model.split_index,
        model.num_classes,
    )
    return LossEval(float(total), grads, terms)


def value_and_grad(
    model: ModelParams,
    inputs: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
) -> tuple[float, ModelParams]:
    """Loss of the full network under ``loss_fn(outputs) -> (loss, d loss / d outputs)``.

    Used for the attacker models, which are plain MLPs with their own objectives.
    """
    out, cache = _run(model.layers, _as_matrix(inputs, model.input_width, "inputs"))
    loss, g_out = loss_fn(out)
    sink: list = [None] * len(model.layers)
    _backprop(model.layers, cache, np.asarray(g_out, dtype=float), sink)
    grads = ModelParams(
        [Layer(dw, db, l.activation) for (dw, db), l in zip(sink, model.layers)],
        model.split_index,
        model.num_classes,
    )
    return float(loss), grads


def proximal_term(model: ModelParams, anchor: ModelParams, rho: float) -> tuple[float, np.ndarray]:
    """(rho/2)||theta - anchor||^2 and its flat gradient."""
    diff = model.flat() - anchor.flat()
    return 0.5 * rho * float(diff @ diff), rho * diff


@dataclass
class OptimizerState:
    """Adam moments plus the per-round learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr0: float = 1e-3
    decay: float = 0.02
    floor: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, **kw) -> "OptimizerState":
        return cls(np.zeros(params.num_params), np.zeros(params.num_params), **kw)

    def learning_rate(self, round_t: int) -> float:
        return max(self.floor, self.lr0 * (1.0 - self.decay) ** (round_t - 1))


def adam_step(
    state: OptimizerState,
    params: ModelParams,
    grads: ModelParams | np.ndarray,
    round_t: int,
) -> tuple[ModelParams, OptimizerState]:
    if round_t < 1:
        raise ValueError(f"round must be >= 1, got {round_t}")
    g = grads.flat() if isinstance(grads, ModelParams) else np.asarray(grads, dtype=float)
    if g.shape != state.m.shape or g.shape != (params.num_params,):
        raise ShapeError(f"gradient shape {g.shape} does not match parameters ({params.num_params},)")
    if not np.all(np.isfinite(g)):
        raise NumericalError("NaN or inf in gradients")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    update = state.learning_rate(round_t) * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, step=step)
    return params.from_flat(params.flat() - update), new_state


# -- serialisation: JSON header + flat little-endian float64 ------------------

def model_header(model: ModelParams) -> dict:
    return {
        "widths": model.widths,
        "activations": [l.activation for l in model.layers],
        "split_index": model.split_index,
        "num_classes": model.num_classes,
        "dtype": "<f8",
        "num_params": model.num_params,
    }


def save_model(model: ModelParams, stem: str | Path) -> None:
    """Write ``<stem>.json`` (shape header) and ``<stem>.bin`` (parameters)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(model_header(model), indent=2))
    stem.with_suffix(".bin").write_bytes(model.flat().astype("<f8").tobytes())


def load_model(stem: str | Path) -> ModelParams:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    vec = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8").astype(float)
    widths = header["widths"]
    layers = [
        Layer(np.zeros((a, b)), np.zeros(b), act)
        for a, b, act in zip(widths[:-1], widths[1:], header["activations"])
    ]
    template = ModelParams(layers, header["split_index"], header["num_classes"])
    return template.from_flat(vec)
