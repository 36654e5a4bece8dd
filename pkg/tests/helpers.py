"""Shared oracles for the test suite.

Gradient checks run in float64 against central finite differences computed
here, independent of ``numcore.finite_diff_grad``.
"""
from __future__ import annotations

import numpy as np

from kitchenil import numcore as nc
from kitchenil.collect import ExpertPolicy, gaussian_log_prob, init_expert, log_prob_grads
from kitchenil.compress import encoder_backward, encoder_forward_features, info_nce_loss, make_encoder
from kitchenil.policy import BcBatch, bc_loss, init_policy

GRAD_TOL = 1e-4


def central_diff(f, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, np.float64).copy()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30))


def _flat(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]).astype(np.float64)


def _split(vec, like):
    out, i = [], 0
    for a in like:
        out.append(vec[i:i + a.size].reshape(a.shape))
        i += a.size
    return out


# ---------------------------------------------------------------- checks
def check_mlp_regression(seed: int) -> float:
    """Mean squared error of a small tanh/relu MLP, gradients wrt params and inputs."""
    rng = np.random.default_rng(seed)
    act = "tanh" if seed % 2 == 0 else "relu"
    p = nc.init_mlp([4, 6, 5, 3], act, rng, np.float64)
    for b in p.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    x = rng.normal(size=(7, 4))
    y = rng.normal(size=(7, 3))

    def loss_of(params, xx):
        return float(((nc.mlp_forward(params, xx) - y) ** 2).mean())

    out, cache = nc.mlp_forward(p, x, return_cache=True)
    grads, gx = nc.mlp_backward(p, x, 2 * (out - y) / out.size, cache)
    like = p.arrays()
    num = central_diff(lambda v: loss_of(nc.MlpParams.from_arrays(_split(v, like), act), x),
                       _flat(like))
    num_x = central_diff(lambda v: loss_of(p, v.reshape(x.shape)), x.ravel())
    return max(relative_error(_flat(grads), num), relative_error(gx, num_x))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def check_info_nce(seed: int) -> float:
    """InfoNCE wrt the query, plus end to end through an L2-normalized encoder."""
    rng = np.random.default_rng(seed)
    d, B, K = 5, 3, 8
    q = _unit(rng.normal(size=(B, d)))
    k = _unit(rng.normal(size=(B, d)))
    queue = _unit(rng.normal(size=(K, d)))
    tau = float(rng.uniform(0.1, 0.5))
    _, gq = info_nce_loss(q, k, queue, tau)
    # perturbations of 1e-7 stay inside the unit-norm tolerance
    num_q = central_diff(lambda v: info_nce_loss(v.reshape(q.shape), k, queue, tau)[0],
                         q.ravel(), h=1e-7)

    enc = make_encoder(seed, d=d, hidden=6, in_dim=4, tag="in_domain_moco", normalize=True)
    enc.body = enc.body.astype(np.float64)
    x = rng.normal(size=(B, 4))
    z, cache = encoder_forward_features(enc, x)
    _, gz = info_nce_loss(z, k, queue, tau)
    grads = encoder_backward(enc, x, gz, cache)
    like = enc.arrays()

    def f(v):
        e = enc.copy()
        e.set_arrays(_split(v, like))
        return info_nce_loss(encoder_forward_features(e, x)[0], k, queue, tau)[0]

    num = central_diff(f, _flat(like))
    return max(relative_error(gq, num_q), relative_error(_flat(grads), num))


def check_bc(seed: int, mode: str) -> float:
    """BC loss (mean or reparameterized sampled) wrt all policy arrays incl. log-scale."""
    rng = np.random.default_rng(seed)
    p = init_policy(3, 2, (5,), rng, sigma_init=-0.7, dtype=np.float64)
    p.log_sigma = rng.uniform(-1.5, 0.5, 3)
    p.in_mean = rng.normal(0, 0.2, 11)
    p.in_std = rng.uniform(0.5, 2.0, 11)
    n = 6
    batch = BcBatch(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), rng.normal(size=(n, 6)),
                    rng.uniform(-1, 1, (n, 3)))
    noise = rng.standard_normal((n, 3))
    _, grads = bc_loss(p, batch, mode, noise=noise)
    like = p.arrays()

    def f(v):
        q = p.astype(np.float64)
        arr = _split(v, like)
        q.mlp = nc.MlpParams.from_arrays(arr[:-1], q.mlp.activation)
        q.log_sigma = arr[-1]
        return bc_loss(q, batch, mode, noise=noise)[0]

    return relative_error(_flat(grads), central_diff(f, _flat(like)))


def check_npg_log_prob(seed: int) -> float:
    """Summed Gaussian log-likelihood wrt the expert MLP and log-std."""
    rng = np.random.default_rng(seed)
    pol = init_expert(5, (6,), rng, -0.3, np.float64)
    pol.mlp.weights[-1] = rng.normal(0, 0.5, pol.mlp.weights[-1].shape)
    pol = ExpertPolicy(pol.mlp, rng.uniform(-1, 0.5, 3))
    feats = rng.normal(size=(8, 5))
    acts = rng.normal(size=(8, 3))
    grads = log_prob_grads(pol, feats, acts)
    like = pol.arrays()

    def f(v):
        return float(gaussian_log_prob(pol.with_arrays(_split(v, like)), feats, acts).sum())

    return relative_error(_flat(grads), central_diff(f, _flat(like)))


GRADIENT_CHECKS = {
    "mlp_regression": check_mlp_regression,
    "info_nce": check_info_nce,
    "bc_mean": lambda s: check_bc(s, "mean_mse"),
    "bc_sampled": lambda s: check_bc(s, "sampled"),
    "npg_log_prob": check_npg_log_prob,
}
