import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleasim.errors import NumericalError, ShapeError
from fleasim.losses import loss_clf, softmax
from fleasim.nn import (
    Batch,
    Layer,
    ModelParams,
    OptimizerState,
    adam_step,
    forward,
    forward_back,
    forward_front,
    grad_total_loss,
    init_model,
    load_model,
    proximal_term,
    save_model,
    value_and_grad,
)
from oracles import adam_scalar, finite_difference, mlp_forward_loops, rel_err


def linear_identity(width, classes):
    return ModelParams(
        [Layer(np.eye(width), np.zeros(width), "linear"), Layer(np.eye(width, classes), np.zeros(classes), "linear")],
        1,
        classes,
    )


def test_identity_front_returns_inputs(rng):
    x = rng.normal(size=(5, 3))
    assert np.array_equal(forward_front(linear_identity(3, 3), x), x)


def test_zero_front_gives_zero_activations(rng):
    m = init_model([4, 3, 2], 1, seed=0)
    m = m.from_flat(np.concatenate([np.zeros(4 * 3 + 3), m.flat()[15:]]))
    assert not forward_front(m, rng.normal(size=(6, 4))).any()


def test_front_matches_straight_line_oracle(rng):
    m = init_model([4, 5, 3, 2], 2, seed=7)
    x = rng.normal(size=(3, 4))
    oracle = mlp_forward_loops([(l.weight, l.bias, l.activation) for l in m.layers[:2]], x)
    assert np.max(np.abs(forward_front(m, x) - oracle)) < 1e-12


def test_identity_back_returns_activations(rng):
    f = rng.normal(size=(4, 3))
    assert np.array_equal(forward_back(linear_identity(3, 3), f), f)


def test_back_matches_straight_line_oracle(rng):
    m = init_model([6, 8, 5, 3], 1, seed=2)
    f = rng.normal(size=(2, 8))
    oracle = mlp_forward_loops([(l.weight, l.bias, l.activation) for l in m.layers[1:]], f)
    assert np.max(np.abs(forward_back(m, f) - oracle)) < 1e-12


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_split_composition_is_exact(seed, split):
    m = init_model([5, 6, 4, 3, 2], split, seed=seed)
    x = np.random.default_rng(seed).normal(size=(7, 5))
    assert np.array_equal(forward_back(m, forward_front(m, x)), forward(m, x))


def test_forward_is_pure(rng):
    m = init_model([4, 3, 2], 1, seed=1)
    x = rng.normal(size=(5, 4))
    assert np.array_equal(forward(m, x), forward(m, x))


def test_shape_errors_name_dims():
    m = init_model([4, 3, 2], 1, seed=1)
    with pytest.raises(ShapeError, match="expected \\(n, 4\\)"):
        forward_front(m, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        forward_back(m, np.zeros((2, 4)))


@pytest.mark.parametrize("split", [0, 2])
def test_split_index_bounds(split):
    with pytest.raises(ShapeError):
        init_model([4, 3, 2], split)


def test_incompatible_layers_rejected():
    with pytest.raises(ShapeError):
        ModelParams([Layer(np.zeros((3, 4)), np.zeros(4)), Layer(np.zeros((5, 2)), np.zeros(2), "linear")], 1, 2)


def test_batch_labels_must_be_distributions():
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3)), np.array([[0.5, 0.6], [1.0, 0.0]]))
    with pytest.raises(ShapeError):
        Batch(np.zeros((2, 3)), np.eye(2)[[0]])


# -- gradients ----------------------------------------------------------------

def _problem(seed, n=6, widths=(5, 4, 3, 3), split=1):
    rng = np.random.default_rng(seed)
    model = init_model(list(widths), split, seed=seed)
    snap = model.from_flat(model.flat() + 0.3 * rng.normal(size=model.num_params))
    x = rng.normal(size=(n, widths[0]))
    y = np.eye(widths[-1])[rng.integers(0, widths[-1], n)]
    buf = (np.tanh(rng.normal(size=(n, model.feature_width))), np.eye(widths[-1])[rng.integers(0, widths[-1], n)])
    betas = rng.uniform(size=n)
    return model, snap, Batch(x, y), buf, betas


@pytest.mark.parametrize("lam1,lam2,use_buf", [(0, 0, False), (1, 0, True), (0, 3, False), (1, 3, True), (2, 0, False)])
def test_gradients_match_finite_differences(lam1, lam2, use_buf):
    model, snap, batch, buf, betas = _problem(11)
    buf, betas = (buf, betas) if use_buf else (None, None)
    ev = grad_total_loss(model, snap, batch, buf, betas, lam1, lam2)

    def loss(vec):
        return grad_total_loss(model.from_flat(vec), snap, batch, buf, betas, lam1, lam2).loss

    fd = finite_difference(loss, model.flat())
    assert np.max(rel_err(ev.grads.flat(), fd)) < 1e-4


def test_plain_cross_entropy_gradient(rng):
    model, _, batch, _, _ = _problem(4)
    ev = grad_total_loss(model, None, batch)
    p = softmax(forward(model, batch.inputs))
    dz = (p - batch.labels) / len(batch)
    h = forward_front(model, batch.inputs)
    # last layer of a two-hidden-layer net: dW = h2^T dz
    h2 = np.tanh(h @ model.layers[1].weight + model.layers[1].bias)
    assert np.allclose(ev.grads.layers[-1].weight, h2.T @ dz, atol=1e-14)
    assert ev.loss == pytest.approx(loss_clf(forward(model, batch.inputs), batch.labels), abs=1e-15)


def test_distillation_zero_when_snapshot_is_model():
    model, _, batch, _, _ = _problem(5)
    ev = grad_total_loss(model, model, batch, lambda1=1.0)
    assert ev.terms["dis"] == 0.0


def test_snapshot_gets_no_gradient():
    model, snap, batch, buf, betas = _problem(6)
    before = snap.flat().copy()
    grad_total_loss(model, snap, batch, buf, betas, 1.0, 3.0)
    assert np.array_equal(snap.flat(), before)


def test_negative_weights_rejected():
    model, snap, batch, _, _ = _problem(7)
    with pytest.raises(ValueError):
        grad_total_loss(model, snap, batch, lambda2=-1.0)


def test_overflow_is_named():
    model, snap, batch, _, _ = _problem(8)
    huge = model.from_flat(model.flat() * 1e308)
    with pytest.raises(NumericalError, match="clf"):
        grad_total_loss(huge, None, batch)


def test_value_and_grad_matches_finite_differences(rng):
    model = init_model([3, 4, 2], 1, seed=3)
    x, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))

    def mse(out, target=t):
        d = out - target
        return float((d * d).sum()), 2 * d

    _, g = value_and_grad(model, x, mse)
    fd = finite_difference(lambda v: value_and_grad(model.from_flat(v), x, mse)[0], model.flat())
    assert np.max(rel_err(g.flat(), fd)) < 1e-4


def test_proximal_term_scalar_case():
    m = init_model([1, 1, 1], 1, seed=0)
    theta = m.from_flat(np.array([2.0, 0.0, 0.0, 0.0]))
    anchor = m.from_flat(np.array([1.0, 0.0, 0.0, 0.0]))
    value, grad = proximal_term(theta, anchor, 0.1)
    assert value == pytest.approx(0.05) and grad[0] == pytest.approx(0.1)


# -- Adam -----------------------------------------------------------------------

def scalar_model(value=0.0):
    return ModelParams([Layer(np.array([[value]]), np.zeros(1), "linear"), Layer(np.zeros((1, 1)), np.zeros(1), "linear")], 1, 1)


def test_adam_zero_gradient_leaves_params():
    m = init_model([3, 2, 2], 1, seed=1)
    st_ = OptimizerState.fresh(m)
    new, _ = adam_step(st_, m, np.zeros(m.num_params), 1)
    assert np.array_equal(new.flat(), m.flat())


def test_learning_rate_schedule():
    st_ = OptimizerState.fresh(scalar_model())
    assert st_.learning_rate(1) == 1e-3
    assert st_.learning_rate(2) == pytest.approx(0.98e-3)
    assert st_.learning_rate(10_000) == 1e-5


@given(st.integers(1, 2000))
def test_learning_rate_within_bounds(t):
    lr = OptimizerState.fresh(scalar_model()).learning_rate(t)
    assert 1e-5 <= lr <= 1e-3


def test_adam_scalar_trajectory_matches_hand_oracle():
    m = scalar_model()
    st_ = OptimizerState.fresh(m)
    traj = []
    for _ in range(3):
        g = np.array([1.0, 0.0, 0.0, 0.0])
        m, st_ = adam_step(st_, m, g, 1)
        traj.append(m.flat()[0])
    assert np.allclose(traj, adam_scalar([1.0, 1.0, 1.0]), atol=1e-15, rtol=0)


def test_adam_rejects_nan_and_leaves_state():
    m = scalar_model()
    st_ = OptimizerState.fresh(m)
    with pytest.raises(NumericalError):
        adam_step(st_, m, np.array([np.nan, 0, 0, 0]), 1)
    assert st_.step == 0 and not st_.m.any()


def test_adam_rejects_round_zero_and_bad_shape():
    m = scalar_model()
    with pytest.raises(ValueError):
        adam_step(OptimizerState.fresh(m), m, np.zeros(4), 0)
    with pytest.raises(ShapeError):
        adam_step(OptimizerState.fresh(m), m, np.zeros(3), 1)


# -- serialisation ----------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    m = init_model([7, 5, 3, 4], 2, seed=9)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.same_structure(m) and np.array_equal(back.flat(), m.flat())
    raw = (tmp_path / "m.bin").read_bytes()
    assert len(raw) == 8 * m.num_params
    assert np.array_equal(np.frombuffer(raw, dtype="<f8"), m.flat())
