"""Stage 4: task-conditioned multi-task behavior cloning.

The policy maps ``[z_t | z_g | proprio]`` to the mean of a Gaussian over
3-D actions and carries a learnable per-dimension log-scale. Training reads
frozen embeddings from a cache, or in finetune mode recomputes them through
the encoder and backpropagates into it.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .kitchen2d import ACTION_DIM, PROPRIO_DIM

log = logging.getLogger(__name__)

SIGMA_MIN, SIGMA_MAX = -5.0, 2.0


@dataclass
class BcPolicyParams:
    mlp: nc.MlpParams
    log_sigma: np.ndarray  # (3,)
    obs_dim: int  # d (or state-feature length for the state-based variant)
    goal_dim: int  # g
    in_mean: np.ndarray = None
    in_std: np.ndarray = None

    def __post_init__(self):
        n = self.obs_dim + self.goal_dim + PROPRIO_DIM
        if self.mlp.in_dim != n:
            raise nc.ConfigError(f"policy MLP in-dim {self.mlp.in_dim} != d + g + 6 = {n}")
        if self.in_mean is None:
            self.in_mean = np.zeros(n, np.float32)
            self.in_std = np.ones(n, np.float32)

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays() + [self.log_sigma]

    def set_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        self.mlp = nc.MlpParams.from_arrays(arrays[:-1], self.mlp.activation)
        self.log_sigma = np.clip(arrays[-1], SIGMA_MIN, SIGMA_MAX).astype(arrays[-1].dtype)

    def astype(self, dtype) -> "BcPolicyParams":
        return BcPolicyParams(self.mlp.astype(dtype), self.log_sigma.astype(dtype), self.obs_dim,
                              self.goal_dim, self.in_mean.astype(dtype), self.in_std.astype(dtype))


def init_policy(obs_dim: int, goal_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                sigma_init: float = -1.0, dtype=np.float32, activation: str = "tanh") -> BcPolicyParams:
    mlp = nc.init_mlp([obs_dim + goal_dim + PROPRIO_DIM, *hidden, ACTION_DIM], activation, rng, dtype)
    return BcPolicyParams(mlp, np.full(ACTION_DIM, sigma_init, dtype=dtype), obs_dim, goal_dim)


def _inputs(params: BcPolicyParams, z_t, z_g, proprio) -> np.ndarray:
    z_t, z_g, proprio = (np.atleast_2d(np.asarray(v)) for v in (z_t, z_g, proprio))
    if z_t.shape[-1] != params.obs_dim or z_g.shape[-1] != params.goal_dim \
            or proprio.shape[-1] != PROPRIO_DIM:
        raise nc.ConfigError(
            f"policy input dims ({z_t.shape[-1]}, {z_g.shape[-1]}, {proprio.shape[-1]}) != "
            f"({params.obs_dim}, {params.goal_dim}, {PROPRIO_DIM})")
    x = np.concatenate([z_t, z_g, proprio], axis=-1).astype(params.in_mean.dtype)
    return (x - params.in_mean) / params.in_std


def policy_forward(params: BcPolicyParams, z_t, z_g, proprio):
    """Returns (mu, scale) with scale = exp(clamped log_sigma)."""
    mu = nc.mlp_forward(params.mlp, _inputs(params, z_t, z_g, proprio))
    return mu, np.exp(np.clip(params.log_sigma, SIGMA_MIN, SIGMA_MAX))


@dataclass
class BcBatch:
    z_t: np.ndarray
    z_g: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.z_t) == len(self.z_g) == len(self.proprio) == n):
            raise ValueError("BcBatch arrays must have equal length")

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "BcBatch":
        return BcBatch(self.z_t[idx], self.z_g[idx], self.proprio[idx], self.actions[idx])


def bc_loss(params: BcPolicyParams, batch: BcBatch, mode: str = "mean_mse",
            rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
            want_input_grad: bool = False):
    """Mean squared action error and exact gradients.

    ``mean_mse``: L = mean_i ||mu_i - a_i||^2.
    ``sampled``: L = mean_i ||mu_i + exp(sigma) * z_i - a_i||^2 with z ~ N(0, I),
    differentiated by reparameterization. ``noise`` fixes z explicitly.

    Returns ``(loss, grads)`` with grads aligned to ``params.arrays()``; with
    ``want_input_grad`` also the gradient wrt the raw ``z_t`` inputs.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("bc_loss needs a non-empty batch")
    x = _inputs(params, batch.z_t, batch.z_g, batch.proprio)
    mu, cache = nc.mlp_forward(params.mlp, x, return_cache=True)
    a = batch.actions.astype(mu.dtype)
    ls = np.clip(params.log_sigma, SIGMA_MIN, SIGMA_MAX)
    inside = ((params.log_sigma >= SIGMA_MIN) & (params.log_sigma <= SIGMA_MAX)).astype(mu.dtype)
    if mode == "mean_mse":
        r = mu - a
        g_sigma = np.zeros_like(params.log_sigma)
    elif mode == "sampled":
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng()
            noise = rng.standard_normal(mu.shape).astype(mu.dtype)
        scale = np.exp(ls)
        r = mu + scale * noise - a
        g_sigma = (2.0 / n) * (r * noise).sum(axis=0) * scale * inside
    else:
        raise ValueError(f"unknown bc loss mode {mode!r}")
    per = (r * r).sum(axis=1)
    if not np.all(np.isfinite(per)):
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise nc.NonFiniteError(f"non-finite BC loss at sample {bad}")
    loss = float(per.mean())
    grads, gx = nc.mlp_backward(params.mlp, x, (2.0 / n) * r, cache)
    grads = grads + [g_sigma.astype(params.log_sigma.dtype)]
    if want_input_grad:
        gz = gx[:, :params.obs_dim] / params.in_std[:params.obs_dim]
        return loss, grads, gz
    return loss, grads


def fit_normalizer(params: BcPolicyParams, batch: BcBatch, skip_obs: bool = False) -> None:
    x = np.concatenate([batch.z_t, batch.z_g, batch.proprio], axis=1).astype(np.float64)
    mean, std = x.mean(axis=0), x.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std)
    if skip_obs:
        mean[:params.obs_dim], std[:params.obs_dim] = 0.0, 1.0
    params.in_mean = mean.astype(params.in_mean.dtype)
    params.in_std = std.astype(params.in_std.dtype)


# -------------------------------------------------------- task embeddings
def hashed_name_embedding(name: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit vector in R^dim seeded by a hash of the task name."""
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    v = np.random.default_rng(int.from_bytes(h[:8], "little")).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def context_embedding(task_index: int, n_tasks: int, goal: np.ndarray, target_pose: np.ndarray,
                      layout_xy: np.ndarray) -> np.ndarray:
    """[one-hot task | goal (x, y, angle) | target (x, y, cos, sin) | all object xy]."""
    one_hot = np.zeros(n_tasks, np.float32)
    one_hot[task_index] = 1.0
    tp = np.array([target_pose[0], target_pose[1], math.cos(target_pose[2]),
                   math.sin(target_pose[2])], np.float32)
    return np.concatenate([one_hot, np.asarray(goal, np.float32), tp,
                           np.asarray(layout_xy, np.float32).ravel()])


def context_dim(n_tasks: int, n_objects: int) -> int:
    return n_tasks + 3 + 4 + 2 * n_objects


# ------------------------------------------------------------------- train
@dataclass
class TrainCurves:
    loss: list[float] = field(default_factory=list)


def train_bc(batch: BcBatch, obs_dim: int, goal_dim: int, hidden: Sequence[int] = (256, 256),
             epochs: int = 30, batch_size: int = 256, lr: float = 1e-3, mode: str = "mean_mse",
             sigma_init: float = -1.0, seed: int = 0, encoder=None, frames: np.ndarray | None = None,
             encoder_lr: float = 1e-4, params: BcPolicyParams | None = None,
             activation: str = "tanh"):
    """Adam on ``bc_loss`` over shuffled minibatches.

    Frozen mode uses ``batch.z_t`` directly. Finetune mode (``encoder`` and
    ``frames`` given, frames being preprocessed encoder inputs aligned with
    the batch) recomputes z_t each minibatch and updates the encoder too.
    Returns (params, curves, encoder-or-None).
    """
    rng = np.random.default_rng(seed)
    if len(batch) == 0:
        raise ValueError("empty BC dataset")
    if params is None:
        params = init_policy(obs_dim, goal_dim, hidden, rng, sigma_init, activation=activation)
        fit_normalizer(params, batch)
    opt = nc.AdamState(lr=lr)
    enc_opt = nc.AdamState(lr=encoder_lr) if encoder is not None else None
    curves = TrainCurves()
    n = len(batch)
    for ep in range(epochs):
        order = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            mb = batch.take(idx)
            if encoder is None:
                loss, grads = bc_loss(params, mb, mode, rng)
            else:
                from .compress import encoder_backward, encoder_forward_features
                z, enc_cache = encoder_forward_features(encoder, frames[idx])
                mb = BcBatch(z, mb.z_g, mb.proprio, mb.actions)
                loss, grads, gz = bc_loss(params, mb, mode, rng, want_input_grad=True)
                egrads = encoder_backward(encoder, frames[idx], gz, enc_cache)
                encoder.set_arrays(nc.adam_step(enc_opt, encoder.arrays(), egrads))
            params.set_arrays(nc.adam_step(opt, params.arrays(), grads))
            tot += loss * len(idx)
        curves.loss.append(tot / n)
        log.debug("bc epoch %d loss %.5f", ep, curves.loss[-1])
    return params, curves, encoder


def act_embedded(params: BcPolicyParams, z_t: np.ndarray, z_g: np.ndarray, proprio: np.ndarray,
                 deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
    """Clamped action from an already-embedded observation; batched in, batched out."""
    mu, scale = policy_forward(params, z_t, z_g, proprio)
    if not deterministic:
        rng = rng if rng is not None else np.random.default_rng()
        mu = mu + scale * rng.standard_normal(mu.shape).astype(mu.dtype)
    out = np.clip(mu, -1.0, 1.0)
    return out[0] if np.ndim(z_t) == 1 else out


class FingerprintError(ValueError):
    pass


def act(params: BcPolicyParams, encoder, observation, task_embedding: np.ndarray,
        deterministic: bool = True, rng: np.random.Generator | None = None,
        expected_fingerprint: bytes | None = None) -> np.ndarray:
    """Embed ``observation = (image, proprio)`` and return a clamped action.

    With ``encoder=None`` the first element is taken as the observation
    features directly (state-based policies). ``expected_fingerprint`` is the
    encoder fingerprint recorded at training time.
    """
    obs, proprio = observation
    if encoder is None:
        z_t = np.asarray(obs, np.float32)
    else:
        if expected_fingerprint is not None and encoder.fingerprint != expected_fingerprint:
            raise FingerprintError(
                f"encoder fingerprint {encoder.fingerprint.hex()[:16]} does not match the "
                f"training encoder {expected_fingerprint.hex()[:16]}")
        from .compress import encode_images
        img = np.asarray(obs)
        z_t = encode_images(encoder, img[None] if img.ndim == 3 else img)
        if img.ndim == 3:
            z_t = z_t[0]
    return act_embedded(params, z_t, task_embedding, proprio, deterministic, rng)
