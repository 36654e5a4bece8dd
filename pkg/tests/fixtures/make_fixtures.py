"""Regenerate the golden container fixtures with plain ``struct`` packing.

Run from this directory: ``python make_fixtures.py``.
"""
import struct

PROV = '{"stage": "fixture"}'


def shard_bytes() -> bytes:
    H = W = 2
    out = struct.pack("<4sHHHIHHHHHHI", b"CACT", 1, 3, 7, 2, H, W, 3, 6, 3, 4, len(PROV))
    out += PROV.encode()
    # episode 0: two steps, success
    out += struct.pack("<HB", 2, 1)
    for t in range(2):
        out += bytes((10 * t + k) % 256 for k in range(H * W * 3))
        out += struct.pack("<6f", *(0.5 * t + 0.25 * k for k in range(6)))
        out += struct.pack("<3f", 1.0, -1.0, 0.5 * t)
        out += struct.pack("<4f", t, -t, 2.0, 0.125)
    # episode 1: empty, failure
    out += struct.pack("<HB", 0, 0)
    return out


def cache_bytes() -> bytes:
    fp = bytes(range(32))
    entries = [(3 << 16 | 7, 0, 0, (0.5, -0.5)), (3 << 16 | 7, 0, 1, (1.0, 2.0)),
               (4 << 16 | 1, 2, 0, (-3.0, 0.25))]
    out = struct.pack("<4sH32sHQ", b"CEMB", 1, fp, 2, len(entries))
    for sid, ep, step, z in entries:
        out += struct.pack("<III2f", sid, ep, step, *z)
    return out


if __name__ == "__main__":
    open("golden.cact", "wb").write(shard_bytes())
    open("golden.cemb", "wb").write(cache_bytes())
