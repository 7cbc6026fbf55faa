import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finite_difference, max_rel_error
from uma2.tensor import (
    AdamState,
    ShapeError,
    adam_update,
    affine_backward,
    affine_forward,
    affine_relu_backward,
    affine_relu_forward,
    bce,
    bce_logits,
    glorot_uniform,
    sigmoid,
)


def test_affine_relu_zero_weights():
    out, _ = affine_relu_forward(np.array([1.0, -3.0]), np.zeros((3, 2)), np.zeros(3))
    assert np.array_equal(out, np.zeros(3))


def test_affine_relu_identity_clamps_negative():
    out, _ = affine_relu_forward(np.array([1.0, -2.0]), np.eye(2), np.zeros(2))
    assert out.tolist() == [1.0, 0.0]


def test_affine_relu_hand_arithmetic():
    out, _ = affine_relu_forward(np.ones(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
    assert out.tolist() == [3.0, 7.0]


def test_affine_shape_errors():
    with pytest.raises(ShapeError):
        affine_relu_forward(np.ones(3), np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        affine_relu_forward(np.ones(2), np.eye(2), np.zeros(3))
    _, cache = affine_relu_forward(np.ones(2), np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        affine_relu_backward(np.ones(3), cache)


def test_backward_zero_grad():
    rng = np.random.default_rng(0)
    _, cache = affine_relu_forward(rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3))
    gx, gw, gb = affine_relu_backward(np.zeros(3), cache)
    assert not gx.any() and not gw.any() and not gb.any()


def test_backward_dead_unit():
    w = np.array([[1.0, 1.0]])
    _, cache = affine_relu_forward(np.array([-1.0, -1.0]), w, np.zeros(1))
    gx, gw, gb = affine_relu_backward(np.array([5.0]), cache)
    assert gx.tolist() == [0.0, 0.0] and not gw.any() and not gb.any()


def test_relu_subgradient_at_zero_is_zero():
    _, cache = affine_relu_forward(np.array([0.0]), np.array([[1.0]]), np.zeros(1))
    gx, _, _ = affine_relu_backward(np.array([1.0]), cache)
    assert gx.tolist() == [0.0]


def _random_layer(rng, batch):
    n_in, n_out = rng.integers(1, 6, size=2)
    shape = (batch, n_in) if batch else (n_in,)
    return rng.normal(size=shape), rng.normal(size=(n_out, n_in)), rng.normal(size=n_out)


@pytest.mark.parametrize("relu", [True, False])
def test_affine_gradients_match_finite_differences(relu):
    rng = np.random.default_rng(1)
    done = 0
    while done < 100:
        x, w, b = _random_layer(rng, batch=int(rng.integers(0, 4)))
        out, cache = affine_forward(x, w, b, relu)
        if relu and np.min(np.abs(cache.pre)) < 1e-3:
            continue  # too close to the ReLU kink for h = 1e-5
        upstream = rng.normal(size=out.shape)
        gx, gw, gb = affine_backward(upstream, cache)
        f = lambda: float(np.sum(affine_forward(x, w, b, relu)[0] * upstream))
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            assert max_rel_error(analytic, finite_difference(f, arr)) <= 1e-4
        done += 1


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert 1 - 1e-9 < sigmoid(50.0) <= 1.0
    assert sigmoid(-800.0) == 0.0 or sigmoid(-800.0) > 0
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


@given(st.floats(min_value=-700, max_value=700, allow_nan=False))
def test_sigmoid_reflection(x):
    assert abs(sigmoid(-x) - (1 - sigmoid(x))) <= 1e-12


def test_bce_values():
    assert bce(1, 1.0) == pytest.approx(0.0, abs=1e-11)
    assert bce(1, 0.5) == pytest.approx(math.log(2), abs=1e-6)
    assert bce(0, 0.9) == pytest.approx(math.log(10), abs=1e-6)
    assert math.isfinite(bce(1, 0.0)) and math.isfinite(bce(0, 1.0))


# beyond |z| ~ 15 the probability-space BCE loses the digits a 1e-5 step needs
@given(st.floats(min_value=-12, max_value=12), st.sampled_from([0.0, 1.0]))
def test_bce_logits_gradient(z, y):
    _, g = bce_logits(y, np.array([z]))
    h = 1e-5
    fd = (bce(y, sigmoid(z + h)) - bce(y, sigmoid(z - h))) / (2 * h)
    assert abs(g[0] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_glorot_bounds():
    w = glorot_uniform(30, 10, np.random.default_rng(0))
    assert w.shape == (30, 10)
    assert np.abs(w).max() <= math.sqrt(6 / 40)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    st_ = AdamState.like(p)
    adam_update(p, np.zeros(2), st_)
    assert p.tolist() == [1.0, -2.0]
    assert st_.step == 1


@pytest.mark.parametrize("g", [3.0, -0.25, 1e-3])
def test_adam_first_step_is_lr(g):
    p = np.array([0.0])
    st_ = AdamState.like(p)
    adam_update(p, np.array([g]), st_)
    expected = st_.lr * abs(g) / (abs(g) + st_.eps)
    assert abs(p[0]) == pytest.approx(expected, rel=1e-12)
    assert np.sign(p[0]) == -np.sign(g)


def test_adam_descends_quadratic():
    w = np.array([1.0])
    st_ = AdamState.like(w, lr=0.1)
    prev = w[0]
    for step in range(10):
        adam_update(w, 2 * w, st_)
        assert w[0] < prev
        assert st_.step == step + 1
        assert np.all(st_.v >= 0)
        prev = w[0]


def test_adam_shape_error():
    with pytest.raises(ShapeError):
        adam_update(np.zeros(2), np.zeros(3), AdamState.like(np.zeros(2)))


def test_layer_determinism():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
    a, _ = affine_relu_forward(x, w, b)
    c, _ = affine_relu_forward(x, w, b)
    assert a.tobytes() == c.tobytes()
