"""Counter-based normal variates keyed by (seed, stream, step).

Philox4x32-10 maps a 128-bit counter and a 64-bit key to 128 random bits
without any sequential state, so the noise driving path ``stream`` at solver
step ``step`` can be regenerated in isolation and in any order.
"""
from __future__ import annotations

import zlib

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_TWO_PI = 2.0 * np.pi


@nb.njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 block; all arguments are uint64 holding 32-bit words."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = (hi1 ^ c1 ^ k0) & _MASK
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True)
def _uniform53(a, b):
    # 53-bit uniform in [0, 1)
    return (np.float64(a >> np.uint64(5)) * 67108864.0 + np.float64(b >> np.uint64(6))) * (
        1.0 / 9007199254740992.0
    )


@nb.njit(cache=True)
def fill_normals(seed, stream, step, out):
    """Write ``len(out)`` standard normals for (seed, stream, step) into ``out``.

    Each Philox block yields two Box-Muller normals; the fourth counter word
    indexes blocks, so dimensions up to 2**33 are covered.
    """
    s = np.uint64(seed)
    k0 = s & _MASK
    k1 = s >> _S32
    st = np.uint64(stream)
    c0 = np.uint64(step) & _MASK
    c1 = st & _MASK
    c2 = st >> _S32
    n = out.shape[0]
    blk = 0
    i = 0
    while i < n:
        r0, r1, r2, r3 = philox4x32(c0, c1, c2, np.uint64(blk), k0, k1)
        u1 = 1.0 - _uniform53(r0, r1)
        u2 = _uniform53(r2, r3)
        rad = np.sqrt(-2.0 * np.log(u1))
        out[i] = rad * np.cos(_TWO_PI * u2)
        if i + 1 < n:
            out[i + 1] = rad * np.sin(_TWO_PI * u2)
        i += 2
        blk += 1


@nb.njit(cache=True)
def normals_block(seed, streams, step0, n_steps, d):
    """Normals of shape (len(streams), n_steps, d) for consecutive steps."""
    out = np.empty((streams.shape[0], n_steps, d))
    for p in range(streams.shape[0]):
        for k in range(n_steps):
            fill_normals(seed, streams[p], step0 + k, out[p, k])
    return out


def normals(seed: int, streams, steps, d: int) -> np.ndarray:
    """Vectorised convenience wrapper: normals for every (stream, step) pair.

    Returns an array of shape ``(len(streams), len(steps), d)``.
    """
    streams = np.atleast_1d(np.asarray(streams, dtype=np.int64))
    steps = np.atleast_1d(np.asarray(steps, dtype=np.int64))
    out = np.empty((streams.size, steps.size, d))
    for j, step in enumerate(steps):
        out[:, j, :] = normals_block(np.uint64(seed), streams, int(step), 1, d)[:, 0, :]
    return out


def substream_seed(seed: int, name: str) -> int:
    """Derive an independent 64-bit key for a named workflow stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
