import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitchenil import numcore as nc

from helpers import GRAD_TOL, check_mlp_regression


def test_scalar_mlp_matches_hand_computation():
    p = nc.MlpParams([np.array([[0.5]]), np.array([[2.0]])],
                     [np.array([0.1]), np.array([-0.3])], "tanh")
    y = nc.mlp_forward(p, np.array([[1.0]]))
    assert y[0, 0] == pytest.approx(2.0 * math.tanh(0.6) - 0.3, abs=1e-12)


def test_scalar_mlp_backward_matches_chain_rule():
    p = nc.MlpParams([np.array([[0.5]]), np.array([[2.0]])],
                     [np.array([0.1]), np.array([-0.3])], "tanh")
    grads, gx = nc.mlp_backward(p, np.array([[1.0]]), np.array([[1.0]]))
    h = math.tanh(0.6)
    dz = 2.0 * (1 - h * h)
    assert grads[0][0, 0] == pytest.approx(dz * 1.0)
    assert grads[1][0] == pytest.approx(dz)
    assert grads[2][0, 0] == pytest.approx(h)
    assert grads[3][0] == pytest.approx(1.0)
    assert gx[0, 0] == pytest.approx(dz * 0.5)


def test_adam_two_steps_match_hand_trace():
    st_ = nc.AdamState(lr=0.1)
    p = [np.array([1.0])]
    p = nc.adam_step(st_, p, [np.array([2.0])])
    # step 1: m_hat = g, v_hat = g^2 -> update = lr * sign(g)
    assert p[0][0] == pytest.approx(1.0 - 0.1, abs=1e-7)
    p = nc.adam_step(st_, p, [np.array([-1.0])])
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    assert p[0][0] == pytest.approx(0.9 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-9)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(nc.NonFiniteError, match="w1"):
        nc.adam_step(nc.AdamState(), [np.zeros(2), np.zeros(2)],
                     [np.zeros(2), np.array([np.nan, 0.0])], names=["w0", "w1"])


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradients_match_finite_differences(seed):
    assert check_mlp_regression(seed) < GRAD_TOL


def test_finite_diff_grad_on_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = nc.finite_diff_grad(lambda v: float((v ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)


def test_make_rng_streams_are_keyed():
    a = nc.make_rng(1, "x", 2).random(4)
    assert np.array_equal(a, nc.make_rng(1, "x", 2).random(4))
    assert not np.array_equal(a, nc.make_rng(1, "x", 3).random(4))


def test_fingerprint_sensitive_to_values_shape_and_tag():
    a = np.arange(6, dtype=np.float32)
    base = nc.fingerprint([a])
    assert len(base) == 32
    assert nc.fingerprint([a.copy()]) == base
    assert nc.fingerprint([a.reshape(2, 3)]) != base
    assert nc.fingerprint([a], "t") != base
    b = a.copy()
    b[0] = np.nextafter(b[0], np.float32(1))
    assert nc.fingerprint([b]) != base


def test_input_dim_mismatch_is_reported():
    p = nc.init_mlp([3, 2], "tanh", np.random.default_rng(0))
    with pytest.raises(nc.ConfigError):
        nc.mlp_forward(p, np.zeros((1, 4), np.float32))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
       st.integers(0, 2 ** 16))
def test_flatten_unflatten_round_trip(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s).astype(np.float32) for s in shapes]
    back = nc.unflatten(nc.flatten(arrays), arrays)
    assert all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(arrays, back))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 16))
def test_per_example_gradients_sum_to_batch_gradient(batch, width, seed):
    rng = np.random.default_rng(seed)
    p = nc.init_mlp([3, width, 2], "tanh", rng, np.float64)
    x = rng.normal(size=(batch, 3))
    g = rng.normal(size=(batch, 2))
    full, _ = nc.mlp_backward(p, x, g)
    per, _ = nc.mlp_backward(p, x, g, per_example=True)
    for a, b in zip(full, per):
        np.testing.assert_allclose(a, b.sum(axis=0), atol=1e-12)
