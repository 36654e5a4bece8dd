"""Dense numerics shared by every learning stage.

Feed-forward MLPs with hand-written reverse mode, Adam, and a central
finite-difference gradient oracle. Arrays are numpy; the pipeline runs in
float32 but every routine is dtype-generic so the gradient oracle can run
in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class ConfigError(ValueError):
    """Fatal configuration / shape error."""


class NonFiniteError(FloatingPointError):
    pass


def make_rng(*keys) -> np.random.Generator:
    """Derive an independent RNG stream from a tuple of ints/strings."""
    import hashlib

    h = hashlib.sha256(repr(tuple(keys)).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each (in, out)
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("weights/biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigError(f"layer {i} in-dim {w.shape[0]} != previous out-dim")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], activation: str) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def astype(self, dtype) -> "MlpParams":
        return MlpParams.from_arrays([a.astype(dtype) for a in self.arrays()], self.activation)

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()], self.activation)


def init_mlp(sizes: Sequence[int], activation: str, rng: np.random.Generator,
             dtype=np.float32) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype))
        bs.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(ws, bs, activation)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0)


def _act_grad(name, z, h):
    if name == "tanh":
        return 1 - h * h
    return (z > 0).astype(z.dtype)


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Hidden layers use ``params.activation``; the output layer is linear."""
    if x.shape[-1] != params.in_dim:
        raise ConfigError(f"input dim {x.shape[-1]} != MLP in-dim {params.in_dim}")
    h = x
    cache = [(None, x)]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == n - 1 else _act(params.activation, z)
        cache.append((z, h))
    return (h, cache) if return_cache else h


def mlp_backward(params: MlpParams, x: np.ndarray, grad_out: np.ndarray,
                 cache=None, per_example: bool = False):
    """Reverse-mode gradients of ``sum(grad_out * mlp_forward(params, x))``.

    Returns ``(grads, grad_x)`` where ``grads`` is a flat list matching
    ``params.arrays()``. With ``per_example`` each gradient gains a leading
    batch axis (x must be 2-D).
    """
    if cache is None:
        out, cache = mlp_forward(params, x, return_cache=True)
    else:
        out = cache[-1][1]
    if grad_out.shape != out.shape:
        raise ConfigError(f"grad_out shape {grad_out.shape} != output shape {out.shape}")
    n = len(params.weights)
    grads: list[np.ndarray] = [None] * (2 * n)
    delta = grad_out
    for i in range(n - 1, -1, -1):
        z, h = cache[i + 1]
        if i != n - 1:
            delta = delta * _act_grad(params.activation, z, h)
        h_in = cache[i][1]
        if per_example:
            grads[2 * i] = np.einsum("bi,bo->bio", h_in, delta)
            grads[2 * i + 1] = delta
        else:
            h2 = h_in.reshape(-1, h_in.shape[-1])
            d2 = delta.reshape(-1, delta.shape[-1])
            grads[2 * i] = h2.T @ d2
            grads[2 * i + 1] = d2.sum(axis=0)
        delta = delta @ params.weights[i].T
    return grads, delta


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              names: Sequence[str] | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam update. Moments in ``state`` are updated in place."""
    if len(params) != len(grads):
        raise ConfigError("params/grads length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigError(f"block {i}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"block {i}"
            raise NonFiniteError(f"non-finite gradient in parameter {label}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append((p - upd).astype(p.dtype, copy=False))
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float | None = None) -> np.ndarray:
    """Central differences per coordinate.

    Default step is ``1e-3 * max(1, |x_i|)``.
    """
    x = np.asarray(x)
    flat = x.astype(np.float64).ravel()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        step = h if h is not None else 1e-3 * max(1.0, abs(flat[i]))
        if step <= 0:
            raise ValueError("finite-difference step must be positive")
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(flat.reshape(x.shape).astype(x.dtype)))
        flat[i] = orig - step
        fm = float(f(flat.reshape(x.shape).astype(x.dtype)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(x.shape)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, robust to all-zero gradients."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, i = [], 0
    for a in like:
        out.append(vec[i:i + a.size].reshape(a.shape).astype(a.dtype))
        i += a.size
    return out


def fingerprint(arrays: Sequence[np.ndarray], tag: str = "") -> bytes:
    """32-byte SHA-256 over shapes, dtypes and raw bytes."""
    import hashlib

    h = hashlib.sha256(tag.encode())
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.shape, a.dtype.str)).encode())
        h.update(a.tobytes())
    return h.digest()
