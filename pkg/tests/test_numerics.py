import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colnet.errors import ConfigError, ShapeError
from colnet.numerics import (
    Adam, RMSprop, affine, dropout_mask, glorot_init, make_optimizer, optimizer_step, relu,
    sigmoid, softmax,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


# --- affine -----------------------------------------------------------------


def test_affine_identity():
    assert np.array_equal(affine(np.eye(2), [3.0, -1.0], [0.0, 0.0]), [3.0, -1.0])


def test_affine_zero_map_returns_bias():
    assert np.array_equal(affine(np.zeros((2, 3)), [5.0, 6.0, 7.0], [1.0, 2.0]), [1.0, 2.0])


def test_affine_hand_multiplication():
    # [[1,2],[3,4]] @ (1,1) = (3,7); plus (1,0)
    assert np.array_equal(affine([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0], [1.0, 0.0]), [4.0, 7.0])


def test_affine_row_stack_matches_per_row():
    rng = np.random.default_rng(0)
    W, b, X = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
    out = affine(W, X, b)
    for k in range(5):
        assert np.allclose(out[k], W @ X[k] + b, atol=1e-14)


def test_affine_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="2x3.*x is 2"):
        affine(np.zeros((2, 3)), np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeError):
        affine(np.zeros((2, 3)), np.zeros(3), np.zeros(3))


# --- activations --------------------------------------------------------------


def test_relu_examples():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert np.array_equal(relu(-np.arange(1.0, 5.0)), np.zeros(4))
    assert np.array_equal(relu(np.array([0.5])), [0.5])


@given(vectors)
def test_relu_idempotent(x):
    assert np.array_equal(relu(relu(x)), relu(x))


def test_sigmoid_examples():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([2.0]))[0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-15)
    assert sigmoid(np.array([2.0]))[0] == pytest.approx(0.880797, abs=1e-6)


@given(vectors)
def test_sigmoid_symmetry(x):
    assert np.allclose(sigmoid(x) + sigmoid(-x), 1.0, rtol=0, atol=1e-12)


def test_sigmoid_stable_at_large_magnitude():
    x = np.array([-1e3, -500.0, -30.0, 30.0, 500.0, 1e3])
    with np.errstate(invalid="raise", divide="raise"), warnings.catch_warnings():
        warnings.simplefilter("error")
        y = sigmoid(x)
    assert np.all(np.isfinite(y))
    assert np.all((y >= 0.0) & (y <= 1.0))
    mid = sigmoid(np.linspace(-30, 30, 601))
    assert np.all((mid > 0.0) & (mid < 1.0))


def test_softmax_examples():
    assert np.allclose(softmax(np.full(3, 7.0)), 1.0 / 3.0, atol=1e-15)
    assert np.array_equal(softmax(np.array([4.2])), [1.0])
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(softmax(np.array([1.0, 2.0, 3.0])), e / e.sum(), atol=1e-15)
    assert np.allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(vectors)
def test_softmax_sums_to_one(x):
    p = softmax(x)
    assert np.all(p >= 0.0)
    assert abs(p.sum() - 1.0) <= 1e-12


@given(vectors, st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(softmax(x + c), softmax(x), atol=1e-12)


def test_softmax_rows():
    X = np.array([[1.0, 2.0], [0.0, 0.0]])
    assert np.allclose(softmax(X).sum(axis=1), 1.0)


# --- dropout ------------------------------------------------------------------


def test_dropout_rate_zero_is_identity():
    m = dropout_mask(10, 0.0, np.random.default_rng(0))
    assert np.array_equal(m, np.ones(10))


def test_dropout_zero_fraction():
    m = dropout_mask(100_000, 0.5, np.random.default_rng(7))
    assert abs(np.mean(m == 0.0) - 0.5) < 0.01
    assert set(np.unique(m)) == {0.0, 2.0}


def test_dropout_deterministic():
    a = dropout_mask(50, 0.3, np.random.default_rng(11))
    b = dropout_mask(50, 0.3, np.random.default_rng(11))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_bad_rate(rate):
    with pytest.raises(ConfigError):
        dropout_mask(3, rate, np.random.default_rng(0))


def test_dropout_expectation_preserved():
    rng = np.random.default_rng(3)
    x = rng.normal(size=20) + 3.0
    masks = dropout_mask((20_000, 20), 0.5, rng)
    est = (masks * x).mean(axis=0)
    assert np.all(np.abs(est - x) <= 0.05 * np.abs(x))
    assert abs(est.sum() / x.sum() - 1.0) < 0.01


# --- optimizers ---------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_bit_identical():
    p = {"w": np.array([1.5, -2.0, 3.25])}
    before = p["w"].copy()
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"w": np.zeros(3)})
    assert np.array_equal(p["w"], before)


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": np.zeros(3)}
    Adam(lr=0.01, eps=1e-12).step(p, {"w": g})
    assert np.allclose(p["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_rmsprop_second_update_smaller():
    g = {"w": np.array([0.5, -1.0])}
    p = {"w": np.zeros(2)}
    opt = RMSprop(lr=0.01)
    opt.step(p, g)
    first = p["w"].copy()
    opt.step(p, g)
    second = p["w"] - first
    assert np.all(np.abs(second) < np.abs(first))


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        Adam().step({"w": np.zeros(3)}, {"w": np.zeros(2)})
    with pytest.raises(ShapeError):
        RMSprop().step({"w": np.zeros(3)}, {})


def test_optimizer_step_counter_and_chaining():
    opt = make_optimizer("adam", lr=0.1)
    p = {"w": np.ones(2)}
    out = optimizer_step(opt, p, {"w": np.ones(2)})
    assert out is p and opt.t == 1
    optimizer_step(opt, p, {"w": np.ones(2)})
    assert opt.t == 2
    assert opt.m["w"].shape == p["w"].shape


def test_make_optimizer_unknown():
    assert make_optimizer("RMSprop").kind == "rmsprop"
    with pytest.raises(ConfigError):
        make_optimizer("sgd")


# --- init -------------------------------------------------------------------


def test_glorot_bounds_and_determinism():
    W = glorot_init(7, 3, np.random.default_rng(5))
    assert W.shape == (7, 3)
    assert np.all(np.abs(W) <= math.sqrt(6.0 / 10.0))
    assert np.array_equal(W, glorot_init(7, 3, np.random.default_rng(5)))


def test_glorot_mean_near_zero():
    W = glorot_init(1000, 1000, np.random.default_rng(0))
    assert abs(W.mean()) < 0.005


def test_glorot_rejects_empty():
    with pytest.raises(ShapeError):
        glorot_init(0, 3, np.random.default_rng(0))


@settings(max_examples=25)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_glorot_bound_property(rows, cols, seed):
    W = glorot_init(rows, cols, np.random.default_rng(seed))
    assert np.all(np.abs(W) <= math.sqrt(6.0 / (rows + cols)))
