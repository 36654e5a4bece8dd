"""Stage 3: compress frames into low-dimensional embeddings.

Encoders see fixed pixel features (a 16x16 block-mean downsample plus 4x4
patch channel means) followed by a ReLU MLP. Two sources: a seeded
random-weight encoder that is never trained, and an in-domain encoder
trained with momentum contrast against a queue of negatives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .augment import pixel_jitter
from .harness.formats import EmbeddingCache, ShardFile

log = logging.getLogger(__name__)

TAGS = ("in_domain_moco", "frozen_random", "finetuned")
NORM_TOL = 1e-3


def preprocess(images: np.ndarray, grid: int = 16, patches: int = 4) -> np.ndarray:
    """(..., H, W, 3) uint8 -> (..., grid*grid*3 + patches*patches*3) float32 in [-0.5, 0.5]."""
    x = images.astype(np.float32) / 255.0 - 0.5
    *lead, h, w, c = x.shape
    f = h // grid
    ds = x.reshape(*lead, grid, f, grid, f, c).mean(axis=(-4, -2))
    p = grid // patches
    pm = ds.reshape(*lead, patches, p, patches, p, c).mean(axis=(-4, -2))
    return np.concatenate([ds.reshape(*lead, -1), pm.reshape(*lead, -1)], axis=-1)


def feature_dim(grid: int = 16, patches: int = 4) -> int:
    return 3 * (grid * grid + patches * patches)


@dataclass
class EncoderParams:
    body: nc.MlpParams
    tag: str = "frozen_random"
    normalize: bool = False

    def __post_init__(self):
        if self.tag not in TAGS:
            raise nc.ConfigError(f"unknown encoder tag {self.tag!r}")

    @property
    def dim(self) -> int:
        return self.body.out_dim

    @property
    def fingerprint(self) -> bytes:
        return nc.fingerprint(self.body.arrays(), f"norm={self.normalize}")

    def arrays(self) -> list[np.ndarray]:
        return self.body.arrays()

    def set_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        self.body = nc.MlpParams.from_arrays(list(arrays), self.body.activation)

    def copy(self, tag: str | None = None) -> "EncoderParams":
        return EncoderParams(self.body.copy(), tag or self.tag, self.normalize)


def make_encoder(seed: int, d: int = 64, hidden: int = 256, in_dim: int | None = None,
                 tag: str = "frozen_random", normalize: bool = False) -> EncoderParams:
    rng = np.random.default_rng(seed)
    body = nc.init_mlp([in_dim or feature_dim(), hidden, d], "relu", rng)
    return EncoderParams(body, tag, normalize)


def make_frozen_encoder(seed: int, d: int = 64, hidden: int = 256) -> EncoderParams:
    return make_encoder(seed, d, hidden, tag="frozen_random")


def _l2n(y: np.ndarray):
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    n = np.maximum(n, 1e-12)
    return y / n, n


def encoder_forward_features(enc: EncoderParams, feats: np.ndarray):
    y, cache = nc.mlp_forward(enc.body, feats, return_cache=True)
    if enc.normalize:
        z, n = _l2n(y)
        return z, (cache, z, n)
    return y, (cache, None, None)


def encoder_backward(enc: EncoderParams, feats: np.ndarray, grad_z: np.ndarray, cache) -> list:
    mcache, z, n = cache
    g = grad_z
    if enc.normalize:
        g = (g - z * (g * z).sum(axis=-1, keepdims=True)) / n
    grads, _ = nc.mlp_backward(enc.body, feats, g.astype(feats.dtype), mcache)
    return grads


def encode_images(enc: EncoderParams, images: np.ndarray) -> np.ndarray:
    return encoder_forward_features(enc, preprocess(images))[0]


# --------------------------------------------------------------- InfoNCE
def _check_unit(name: str, v: np.ndarray) -> None:
    if v.size and not np.all(np.abs(np.linalg.norm(v, axis=-1) - 1) <= NORM_TOL):
        raise ValueError(f"info_nce_loss: {name} rows must be unit-normalized")


def info_nce_loss(q: np.ndarray, k_pos: np.ndarray, queue: np.ndarray, tau: float = 0.2):
    """Softmax cross-entropy of the positive against queue negatives.

    Accepts a single (d,) query or a (B, d) batch; the batch loss is the mean.
    Returns ``(loss, dL/dq)`` with the gradient shaped like ``q``.
    """
    single = q.ndim == 1
    q2, k2 = np.atleast_2d(q), np.atleast_2d(k_pos)
    queue = np.asarray(queue).reshape(-1, q2.shape[-1])
    for name, v in (("q", q2), ("k_pos", k2), ("queue", queue)):
        _check_unit(name, v)
    B = len(q2)
    l_pos = (q2 * k2).sum(axis=1, keepdims=True)
    logits = np.concatenate([l_pos, q2 @ queue.T], axis=1) / tau
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    denom = e.sum(axis=1, keepdims=True)
    loss = float((np.log(denom[:, 0]) + mx[:, 0] - logits[:, 0]).mean())
    p = e / denom
    grad = (p[:, :1] * k2 + p[:, 1:] @ queue - k2) / (tau * B)
    return (loss, grad[0] * B) if single else (loss, grad)


# ------------------------------------------------------------------ MoCo
@dataclass
class MocoState:
    q: EncoderParams
    k: EncoderParams
    queue: np.ndarray  # (K, d), unit rows
    cursor: int = 0
    tau: float = 0.2
    m: float = 0.99
    opt: nc.AdamState = field(default_factory=nc.AdamState)
    steps: int = 0
    last_loss: float = float("nan")


def init_moco(seed: int, d: int = 64, hidden: int = 256, K: int = 1024, tau: float = 0.2,
              m: float = 0.99, lr: float = 1e-3, in_dim: int | None = None) -> MocoState:
    q = make_encoder(seed, d, hidden, in_dim, tag="in_domain_moco", normalize=True)
    rng = nc.make_rng(seed, "moco-queue")
    queue = rng.standard_normal((K, d)).astype(np.float32)
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    return MocoState(q, q.copy(), queue, 0, tau, m, nc.AdamState(lr=lr))


def enqueue(queue: np.ndarray, cursor: int, keys: np.ndarray) -> tuple[np.ndarray, int]:
    """Ring-buffer write: oldest rows are overwritten first."""
    K = len(queue)
    idx = (cursor + np.arange(len(keys))) % K
    out = queue.copy()
    out[idx] = keys
    return out, int((cursor + len(keys)) % K)


def moco_step(state: MocoState, views_q: np.ndarray, views_k: np.ndarray) -> MocoState:
    """One contrastive update on preprocessed view pairs (B, F)."""
    k, _ = encoder_forward_features(state.k, views_k)
    q, qcache = encoder_forward_features(state.q, views_q)
    loss, gq = info_nce_loss(q, k, state.queue, state.tau)
    if not np.isfinite(loss):
        raise nc.NonFiniteError(f"non-finite InfoNCE loss at MoCo batch {state.steps}")
    grads = encoder_backward(state.q, views_q, gq.astype(np.float32), qcache)
    new_q = state.q.copy()
    new_q.set_arrays(nc.adam_step(state.opt, state.q.arrays(), grads))
    m = np.float32(state.m)
    new_k = state.k.copy()
    new_k.set_arrays([m * pk + (np.float32(1) - m) * pq
                      for pk, pq in zip(state.k.arrays(), new_q.arrays())])
    queue, cursor = enqueue(state.queue, state.cursor, k.astype(np.float32))
    return MocoState(new_q, new_k, queue, cursor, state.tau, state.m, state.opt, state.steps + 1,
                     loss)


def make_views(frames: np.ndarray, rng: np.random.Generator, jitter: float = 0.2,
               shift: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Two independent color-jitter + crop-shift views, preprocessed."""
    a = np.stack([pixel_jitter(f, rng, jitter, shift) for f in frames])
    b = np.stack([pixel_jitter(f, rng, jitter, shift) for f in frames])
    return preprocess(a), preprocess(b)


def train_moco(frames: np.ndarray, steps: int = 500, batch: int = 32, seed: int = 0, d: int = 64,
               hidden: int = 256, K: int = 1024, tau: float = 0.2, m: float = 0.99,
               lr: float = 1e-3, callback=None, jitter: float = 0.2,
               shift: int = 1) -> tuple[EncoderParams, MocoState]:
    """Train on a pool of frames; returns the query encoder (the in-domain model)."""
    if len(frames) == 0:
        raise ValueError("MoCo needs at least one frame")
    rng = nc.make_rng(seed, "moco-batches")
    state = init_moco(seed, d, hidden, K, tau, m, lr)
    for _ in range(steps):
        idx = rng.integers(0, len(frames), size=batch)
        vq, vk = make_views(frames[idx], rng, jitter, shift)
        prev = state
        state = moco_step(state, vq, vk)
        if callback is not None:
            callback(prev, state)
    return state.q.copy("in_domain_moco"), state


def sample_frames(shards: Iterable[ShardFile], n: int, seed: int,
                  n_shards: int | None = None) -> np.ndarray:
    """Pick about ``n`` frames spread evenly over shards, streaming one shard at a time."""
    if n_shards is None:
        shards = list(shards)
        n_shards = len(shards)
    per = -(-n // max(n_shards, 1))
    out = []
    for k, s in enumerate(shards):
        if not s.episodes:
            continue
        imgs = np.concatenate([e.images for e in s.episodes if len(e)])
        rng = nc.make_rng(seed, "moco-frames", k)
        out.append(imgs[np.sort(rng.choice(len(imgs), size=min(per, len(imgs)), replace=False))])
    if not out:
        return np.zeros((0, 0, 0, 3), np.uint8)
    return np.concatenate(out)


# ---------------------------------------------------------------- caching
def encode_dataset(enc: EncoderParams, shards: Iterable[ShardFile],
                   cache: EmbeddingCache | None = None) -> EmbeddingCache:
    """Embed every frame exactly once into a cache keyed by (shard, episode, step)."""
    if cache is None:
        cache = EmbeddingCache(enc.fingerprint, enc.dim)
    for shard in shards:
        for e, ep in enumerate(shard.episodes):
            if len(ep):
                cache.append(enc.fingerprint, shard.shard_id, e, encode_images(enc, ep.images))
    cache.sort()
    return cache


# ------------------------------------------------------------------ probe
def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                 test_y: np.ndarray, n_classes: int, epochs: int = 200, lr: float = 0.05,
                 seed: int = 0) -> float:
    """Softmax regression on standardized features; returns held-out accuracy."""
    mu, sd = train_x.mean(0), train_x.std(0) + 1e-6
    xtr, xte = (train_x - mu) / sd, (test_x - mu) / sd
    rng = np.random.default_rng(seed)
    W = np.zeros((xtr.shape[1], n_classes), np.float32)
    b = np.zeros(n_classes, np.float32)
    opt = nc.AdamState(lr=lr)
    Y = np.eye(n_classes, dtype=np.float32)[train_y]
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(len(xtr)), max(1, len(xtr) // 256)):
            lo = xtr[idx] @ W + b
            lo -= lo.max(1, keepdims=True)
            p = np.exp(lo)
            p /= p.sum(1, keepdims=True)
            g = (p - Y[idx]) / len(idx)
            W, b = nc.adam_step(opt, [W, b], [xtr[idx].T @ g + 1e-4 * W, g.sum(0)])
    return float(((xte @ W + b).argmax(1) == test_y).mean())
