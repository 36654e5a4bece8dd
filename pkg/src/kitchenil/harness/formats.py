"""Bit-exact binary containers for episodes (``CACT``) and embeddings (``CEMB``).

All integers and reals are little-endian; reals are IEEE float32; strings are
length-prefixed UTF-8.

Shard layout::

    magic "CACT" | version u16 | task_id u16 | layout_id u16 | episodes u32
    | H u16 | W u16 | C u16 | proprio_dim u16 | action_dim u16 | state_dim u16
    | provenance_len u32 | provenance bytes
    per episode: length u16 | success u8
        per step: image u8[H*W*C] | proprio f32[P] | action f32[A] | state f32[S]

Cache layout::

    magic "CEMB" | version u16 | fingerprint [32] | d u16 | entries u64
    per entry (sorted): shard_id u32 | episode u32 | step u32 | z f32[d]
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHARD_MAGIC = b"CACT"
SHARD_VERSION = 1
CACHE_MAGIC = b"CEMB"
CACHE_VERSION = 1

_SHARD_HEADER = [
    ("magic", "4s"), ("version", "H"), ("task_id", "H"), ("layout_id", "H"),
    ("episode_count", "I"), ("H", "H"), ("W", "H"), ("C", "H"), ("proprio_dim", "H"),
    ("action_dim", "H"), ("state_dim", "H"), ("provenance_length", "I"),
]
_CACHE_HEADER = [("magic", "4s"), ("version", "H"), ("fingerprint", "32s"), ("d", "H"),
                 ("entry_count", "Q")]


class FormatError(ValueError):
    """Malformed shard or cache bytes; message names the field and byte offset."""


def shard_id(task_id: int, layout_id: int) -> int:
    return (int(task_id) << 16) | int(layout_id)


@dataclass
class Episode:
    images: np.ndarray  # (T, H, W, C) uint8
    proprio: np.ndarray  # (T, P) float32
    actions: np.ndarray  # (T, A) float32
    states: np.ndarray  # (T, S) float32
    success: bool

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_trajectory(cls, traj) -> "Episode":
        T = len(traj.actions)
        pre = traj.states[:T]
        return cls(np.stack(traj.images).astype(np.uint8) if T else np.zeros((0, 0, 0, 0), np.uint8),
                   np.stack([s.proprio() for s in pre]).astype(np.float32) if T else np.zeros((0, 6), np.float32),
                   np.stack(traj.actions).astype(np.float32) if T else np.zeros((0, 3), np.float32),
                   np.stack([s.to_vector() for s in pre]).astype(np.float32) if T else np.zeros((0, 0), np.float32),
                   bool(traj.success))

    def equals(self, other: "Episode") -> bool:
        return (self.success == other.success and len(self) == len(other)
                and all(a.tobytes() == b.tobytes() for a, b in
                        [(self.images, other.images), (self.proprio, other.proprio),
                         (self.actions, other.actions), (self.states, other.states)]))


@dataclass
class ShardFile:
    task_id: int
    layout_id: int
    H: int
    W: int
    C: int
    proprio_dim: int
    action_dim: int
    state_dim: int
    provenance: str = ""
    episodes: list[Episode] = field(default_factory=list)
    version: int = SHARD_VERSION

    @property
    def shard_id(self) -> int:
        return shard_id(self.task_id, self.layout_id)

    def step_dtype(self) -> np.dtype:
        return _step_dtype(self.H, self.W, self.C, self.proprio_dim, self.action_dim, self.state_dim)

    def header_dict(self) -> dict:
        return {"version": self.version, "task_id": self.task_id, "layout_id": self.layout_id,
                "episode_count": len(self.episodes), "H": self.H, "W": self.W, "C": self.C,
                "proprio_dim": self.proprio_dim, "action_dim": self.action_dim,
                "state_dim": self.state_dim, "provenance_length": len(self.provenance.encode())}

    def equals(self, other: "ShardFile") -> bool:
        return (self.header_dict() == other.header_dict() and self.provenance == other.provenance
                and all(a.equals(b) for a, b in zip(self.episodes, other.episodes)))


def _step_dtype(H, W, C, P, A, S) -> np.dtype:
    return np.dtype([("image", "u1", (H * W * C,)), ("proprio", "<f4", (P,)),
                     ("action", "<f4", (A,)), ("state", "<f4", (S,))])


def shard_to_bytes(shard: ShardFile) -> bytes:
    prov = shard.provenance.encode("utf-8")
    head = struct.pack("<" + "".join(f for _, f in _SHARD_HEADER), SHARD_MAGIC, shard.version,
                       shard.task_id, shard.layout_id, len(shard.episodes), shard.H, shard.W,
                       shard.C, shard.proprio_dim, shard.action_dim, shard.state_dim, len(prov))
    parts = [head, prov]
    dt = shard.step_dtype()
    for k, ep in enumerate(shard.episodes):
        T = len(ep)
        if T > 0xFFFF:
            raise FormatError(f"episode {k}: length {T} exceeds u16")
        rec = np.zeros(T, dtype=dt)
        if T:
            rec["image"] = ep.images.reshape(T, -1)
            rec["proprio"] = ep.proprio
            rec["action"] = ep.actions
            rec["state"] = ep.states
        parts.append(struct.pack("<HB", T, int(bool(ep.success))))
        parts.append(rec.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int, name: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated while reading {name} at byte offset "
                              f"{self.pos} (need {n} bytes, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def fields(self, spec) -> dict:
        out = {}
        for name, fmt in spec:
            size = struct.calcsize("<" + fmt)
            out[name] = struct.unpack("<" + fmt, self.take(size, name))[0]
        return out


def shard_from_bytes(buf: bytes, source: str = "<bytes>") -> ShardFile:
    r = _Reader(buf, source)
    h = r.fields(_SHARD_HEADER[:1])
    if h["magic"] != SHARD_MAGIC:
        raise FormatError(f"{source}: bad magic {h['magic']!r} at byte offset 0 (expected {SHARD_MAGIC!r})")
    h.update(r.fields(_SHARD_HEADER[1:2]))
    if h["version"] != SHARD_VERSION:
        raise FormatError(f"{source}: unsupported version {h['version']} at byte offset 4")
    h.update(r.fields(_SHARD_HEADER[2:]))
    try:
        prov = r.take(h["provenance_length"], "provenance").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{source}: provenance is not UTF-8 (byte offset {r.pos})") from e
    shard = ShardFile(h["task_id"], h["layout_id"], h["H"], h["W"], h["C"], h["proprio_dim"],
                      h["action_dim"], h["state_dim"], prov)
    dt = shard.step_dtype()
    for k in range(h["episode_count"]):
        T, ok = struct.unpack("<HB", r.take(3, f"episode {k} header"))
        if ok not in (0, 1):
            raise FormatError(f"{source}: episode {k} success flag {ok} invalid at byte offset {r.pos - 1}")
        raw = r.take(T * dt.itemsize, f"episode {k} steps")
        rec = np.frombuffer(raw, dtype=dt, count=T)
        shard.episodes.append(Episode(
            rec["image"].reshape(T, h["H"], h["W"], h["C"]).copy(), rec["proprio"].astype(np.float32),
            rec["action"].astype(np.float32), rec["state"].astype(np.float32), bool(ok)))
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes after declared payload "
                          f"at byte offset {r.pos}")
    return shard


def write_shard(path, shard: ShardFile) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(shard_to_bytes(shard))
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"failed to write shard {path}: {e}") from e


def read_shard(path) -> ShardFile:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"failed to read shard {path}: {e}") from e
    return shard_from_bytes(buf, str(path))


def read_shard_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<" + "".join(f for _, f in _SHARD_HEADER)))
    r = _Reader(head, str(path))
    h = r.fields(_SHARD_HEADER)
    if h["magic"] != SHARD_MAGIC:
        raise FormatError(f"{path}: bad magic {h['magic']!r} at byte offset 0")
    h["magic"] = h["magic"].decode()
    return h


# ------------------------------------------------------------------- cache
class FingerprintMismatch(ValueError):
    pass


@dataclass
class EmbeddingCache:
    fingerprint: bytes
    d: int
    keys: np.ndarray = None  # (N, 3) uint32: shard_id, episode, step
    z: np.ndarray = None  # (N, d) float32
    task_table: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.keys is None:
            self.keys = np.zeros((0, 3), np.uint32)
        if self.z is None:
            self.z = np.zeros((0, self.d), np.float32)
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        self._index = None

    def __len__(self):
        return len(self.keys)

    def append(self, fingerprint: bytes, sid: int, episode: int, z: np.ndarray) -> None:
        """Add one episode's per-step embeddings."""
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch("cache fingerprint does not match the encoder being appended")
        T = len(z)
        k = np.stack([np.full(T, sid), np.full(T, episode), np.arange(T)], axis=1).astype(np.uint32)
        self.keys = np.concatenate([self.keys, k])
        self.z = np.concatenate([self.z, np.asarray(z, np.float32).reshape(T, self.d)])
        self._index = None

    def sort(self) -> None:
        order = np.lexsort((self.keys[:, 2], self.keys[:, 1], self.keys[:, 0]))
        self.keys, self.z = self.keys[order], self.z[order]
        self._index = None

    def _build_index(self):
        idx = {}
        if len(self.keys):
            ke = self.keys[:, :2].astype(np.int64)
            change = np.ones(len(ke), bool)
            change[1:] = np.any(ke[1:] != ke[:-1], axis=1)
            starts = np.flatnonzero(change)
            ends = np.append(starts[1:], len(ke))
            for s, e in zip(starts, ends):
                idx[(int(ke[s, 0]), int(ke[s, 1]))] = (s, e)
        self._index = idx

    def episode(self, sid: int, episode: int) -> np.ndarray:
        if self._index is None:
            self._build_index()
        s, e = self._index[(int(sid), int(episode))]
        return self.z[s:e]

    def get(self, sid: int, episode: int, step: int) -> np.ndarray:
        return self.episode(sid, episode)[step]

    def check(self, fingerprint: bytes) -> None:
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch(f"cache fingerprint {self.fingerprint.hex()[:16]} != encoder "
                                      f"fingerprint {fingerprint.hex()[:16]}")


def _cache_dtype(d: int) -> np.dtype:
    return np.dtype([("shard", "<u4"), ("episode", "<u4"), ("step", "<u4"), ("z", "<f4", (d,))])


def cache_to_bytes(cache: EmbeddingCache) -> bytes:
    cache.sort()
    head = struct.pack("<4sH32sHQ", CACHE_MAGIC, CACHE_VERSION, cache.fingerprint, cache.d, len(cache))
    rec = np.zeros(len(cache), dtype=_cache_dtype(cache.d))
    rec["shard"], rec["episode"], rec["step"] = cache.keys[:, 0], cache.keys[:, 1], cache.keys[:, 2]
    rec["z"] = cache.z
    return head + rec.tobytes()


def cache_from_bytes(buf: bytes, source: str = "<bytes>", expect_fingerprint: bytes | None = None
                     ) -> EmbeddingCache:
    r = _Reader(buf, source)
    h = r.fields(_CACHE_HEADER[:1])
    if h["magic"] != CACHE_MAGIC:
        raise FormatError(f"{source}: bad magic {h['magic']!r} at byte offset 0 (expected {CACHE_MAGIC!r})")
    h.update(r.fields(_CACHE_HEADER[1:2]))
    if h["version"] != CACHE_VERSION:
        raise FormatError(f"{source}: unsupported version {h['version']} at byte offset 4")
    h.update(r.fields(_CACHE_HEADER[2:]))
    if expect_fingerprint is not None and h["fingerprint"] != expect_fingerprint:
        raise FingerprintMismatch(f"{source}: cache fingerprint does not match the expected encoder")
    dt = _cache_dtype(h["d"])
    n = h["entry_count"]
    raw = r.take(n * dt.itemsize, "entries")
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes at byte offset {r.pos}")
    rec = np.frombuffer(raw, dtype=dt, count=n)
    keys = np.stack([rec["shard"], rec["episode"], rec["step"]], axis=1).astype(np.uint32) \
        if n else np.zeros((0, 3), np.uint32)
    if n > 1:
        k64 = keys.astype(np.int64)
        code = (k64[:, 0] << 40) | (k64[:, 1] << 20) | k64[:, 2]
        if np.any(np.diff(code) <= 0):
            raise FormatError(f"{source}: entries are not strictly sorted")
    return EmbeddingCache(h["fingerprint"], h["d"], keys, rec["z"].astype(np.float32).reshape(n, h["d"]))


def write_cache(path, cache: EmbeddingCache) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(cache_to_bytes(cache))
    os.replace(tmp, path)


def read_cache(path, expect_fingerprint: bytes | None = None) -> EmbeddingCache:
    path = Path(path)
    return cache_from_bytes(path.read_bytes(), str(path), expect_fingerprint)


def read_cache_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sH32sHQ"))
    h = _Reader(head, str(path)).fields(_CACHE_HEADER)
    if h["magic"] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {h['magic']!r} at byte offset 0")
    h["magic"] = h["magic"].decode()
    h["fingerprint"] = h["fingerprint"].hex()
    return h
