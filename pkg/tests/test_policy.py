import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kitchenil import numcore as nc
from kitchenil.compress import encode_images, make_frozen_encoder
from kitchenil.policy import (BcBatch, FingerprintError, act, act_embedded, bc_loss,
                              context_dim, context_embedding, hashed_name_embedding, init_policy,
                              policy_forward, train_bc)

from helpers import GRAD_TOL, check_bc


def test_scalar_policy_oracle():
    p = init_policy(1, 1, (1,), np.random.default_rng(0), dtype=np.float64)
    n = 1 + 1 + 6
    w0 = np.zeros((n, 1))
    w0[0, 0] = 0.5
    p.mlp = nc.MlpParams([w0, np.array([[2.0, -1.0, 0.0]])], [np.array([0.1]), np.zeros(3)], "tanh")
    mu, scale = policy_forward(p, [[1.0]], [[0.0]], np.zeros((1, 6)))
    h = math.tanh(0.6)
    np.testing.assert_allclose(mu, [[2 * h, -h, 0.0]])
    np.testing.assert_allclose(scale, np.exp(-1.0) * np.ones(3))
    loss, _ = bc_loss(p, BcBatch(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 6)),
                                 np.zeros((1, 3))))
    assert loss == pytest.approx(5 * h * h)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("mode", ["mean_mse", "sampled"])
def test_bc_gradients_match_finite_differences(seed, mode):
    assert check_bc(seed, mode) < GRAD_TOL


def _toy_batch(rng, n=64):
    return BcBatch(rng.normal(size=(n, 3)).astype(np.float32), rng.normal(size=(n, 2)).astype(np.float32),
                   rng.normal(size=(n, 6)).astype(np.float32), rng.uniform(-1, 1, (n, 3)).astype(np.float32))


def test_sampled_loss_decomposes_into_mean_error_plus_variance():
    rng = np.random.default_rng(0)
    p = init_policy(3, 2, (8,), rng, sigma_init=-0.5, dtype=np.float64)
    b = _toy_batch(rng, 8)
    mean_loss, _ = bc_loss(p, b)
    draws = [bc_loss(p, b, "sampled", rng)[0] for _ in range(4000)]
    expect = mean_loss + 3 * math.exp(2 * -0.5)
    assert np.mean(draws) == pytest.approx(expect, rel=0.02)


def test_log_scale_is_untouched_by_mean_loss_and_shrinks_under_sampled_loss():
    rng = np.random.default_rng(1)
    b = _toy_batch(rng)
    p_mean, _, _ = train_bc(b, 3, 2, (16,), epochs=20, batch_size=16, seed=0)
    np.testing.assert_array_equal(p_mean.log_sigma, np.full(3, -1.0, np.float32))
    p_samp, _, _ = train_bc(b, 3, 2, (16,), epochs=20, batch_size=16, seed=0, mode="sampled")
    assert np.all(p_samp.log_sigma < -1.0)


def test_policy_memorizes_a_small_dataset():
    rng = np.random.default_rng(2)
    b = _toy_batch(rng, 32)
    p, curves, _ = train_bc(b, 3, 2, (64, 64), epochs=300, batch_size=32, seed=0, lr=3e-3)
    assert curves.loss[-1] < 0.01 * curves.loss[0]


def test_task_embedding_switches_behavior():
    rng = np.random.default_rng(3)
    n = 200
    obs = rng.normal(size=(n, 3)).astype(np.float32)
    prop = rng.normal(size=(n, 6)).astype(np.float32)
    e0, e1 = np.eye(2, dtype=np.float32)
    z_g = np.concatenate([np.tile(e0, (n, 1)), np.tile(e1, (n, 1))])
    acts = np.concatenate([np.tile([0.8, 0, 0], (n, 1)), np.tile([-0.8, 0, 0], (n, 1))]).astype(np.float32)
    b = BcBatch(np.concatenate([obs, obs]), z_g, np.concatenate([prop, prop]), acts)
    p, _, _ = train_bc(b, 3, 2, (32,), epochs=40, batch_size=64, seed=0)
    a0 = act_embedded(p, obs[:10], np.tile(e0, (10, 1)), prop[:10])
    a1 = act_embedded(p, obs[:10], np.tile(e1, (10, 1)), prop[:10])
    assert np.all(a0[:, 0] > 0.5) and np.all(a1[:, 0] < -0.5)


def test_act_checks_encoder_fingerprint_and_clamps():
    enc = make_frozen_encoder(0, 8, 16)
    p = init_policy(8, 4, (8,), np.random.default_rng(0))
    p.mlp.biases[-1][:] = 50.0
    img = np.zeros((48, 48, 3), np.uint8)
    a = act(p, enc, (img, np.zeros(6)), np.zeros(4), expected_fingerprint=enc.fingerprint)
    assert a.shape == (3,) and np.all(a == 1.0)
    np.testing.assert_array_equal(
        a, act_embedded(p, encode_images(enc, img[None])[0], np.zeros(4), np.zeros(6)))
    with pytest.raises(FingerprintError):
        act(p, make_frozen_encoder(1, 8, 16), (img, np.zeros(6)), np.zeros(4),
            expected_fingerprint=enc.fingerprint)


def test_stochastic_act_is_seeded():
    p = init_policy(3, 2, (8,), np.random.default_rng(0))
    x = (np.zeros(3), np.zeros(2), np.zeros(6))
    a = act_embedded(p, *x, deterministic=False, rng=np.random.default_rng(5))
    b = act_embedded(p, *x, deterministic=False, rng=np.random.default_rng(5))
    assert np.array_equal(a, b) and not np.array_equal(a, act_embedded(p, *x))


def test_input_dims_are_validated():
    p = init_policy(3, 2, (8,), np.random.default_rng(0))
    with pytest.raises(nc.ConfigError):
        act_embedded(p, np.zeros(4), np.zeros(2), np.zeros(6))


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=20), st.integers(2, 64))
def test_hashed_name_embedding_is_unit_and_stable(name, dim):
    v = hashed_name_embedding(name, dim)
    assert v.shape == (dim,) and abs(np.linalg.norm(v) - 1) < 1e-5
    assert np.array_equal(v, hashed_name_embedding(name, dim))


def test_context_embedding_layout():
    z = context_embedding(2, 6, np.array([0.1, 0.2, 0.3]), np.array([0.4, 0.5, 0.0]),
                          np.arange(14).reshape(7, 2))
    assert len(z) == context_dim(6, 7) == 27
    assert z[2] == 1 and z[:6].sum() == 1
    np.testing.assert_allclose(z[6:9], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(z[9:13], [0.4, 0.5, 1.0, 0.0])
