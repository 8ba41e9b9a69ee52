"""Direct N-body kernel summation (the hot loop shared by every module)."""
from __future__ import annotations

import numba as nb
import numpy as np

BS2D = 0
BS3D = 1
POWER = 2
LOG = 3

_BLOCK = 64


@nb.njit(cache=True, inline="always")
def _radial_factor(kind, scale, power, r2):
    if kind == LOG:
        return 0.5 * scale * np.log(r2)
    if power == 0.0:
        return scale
    if power == 1.0:
        return scale / np.sqrt(r2)
    if power == 2.0:
        return scale / r2
    return scale * r2 ** (-0.5 * power)


@nb.njit(cache=True)
def _generic_block(lo, hi, kind, scale, power, delta2, targets, sources, vecs, groups, out):
    d = targets.shape[1]
    ns = sources.shape[0]
    cnt = 0
    for i in range(lo, hi):
        for s in range(ns):
            r2 = 0.0
            for a in range(d):
                da = targets[i, a] - sources[s, a]
                r2 += da * da
            if r2 == 0.0 or r2 < delta2:
                cnt += 1
                continue
            g = groups[s]
            if kind == BS2D:
                f = scale * vecs[s, 0] / r2
                out[g, i, 0] -= (targets[i, 1] - sources[s, 1]) * f
                out[g, i, 1] += (targets[i, 0] - sources[s, 0]) * f
            elif kind == BS3D:
                inv = -scale / (r2 * np.sqrt(r2))
                g0 = (targets[i, 0] - sources[s, 0]) * inv
                g1 = (targets[i, 1] - sources[s, 1]) * inv
                g2 = (targets[i, 2] - sources[s, 2]) * inv
                out[g, i, 0] += g1 * vecs[s, 2] - g2 * vecs[s, 1]
                out[g, i, 1] += g2 * vecs[s, 0] - g0 * vecs[s, 2]
                out[g, i, 2] += g0 * vecs[s, 1] - g1 * vecs[s, 0]
            else:
                f = _radial_factor(kind, scale, power, r2)
                for a in range(d):
                    out[g, i, a] += f * vecs[s, a]
    return cnt


@nb.njit(cache=True, parallel=True)
def pair_sum(kind, scale, power, delta, targets, sources, vecs, groups, n_groups):
    """out[g, i] = sum over sources s in group g of K(targets[i] - sources[s]) vecs[s].

    Pairs closer than ``delta`` are dropped.  Work is split over blocks of
    targets; within a target the source order is fixed, so results do not
    depend on the number of worker threads.
    """
    nt, d = targets.shape
    out = np.zeros((n_groups, nt, d))
    nblk = (nt + _BLOCK - 1) // _BLOCK
    dropped = np.zeros(nblk, dtype=np.int64)
    delta2 = delta * delta
    for b in nb.prange(nblk):
        lo = b * _BLOCK
        hi = min(nt, lo + _BLOCK)
        dropped[b] = _generic_block(lo, hi, kind, scale, power, delta2, targets,
                                    sources, vecs, groups, out)
    return out, dropped.sum()


@nb.njit(cache=True)
def _bs2d_block(lo, hi, scale, delta2, targets, sources, wts, groups, out):
    ns = sources.shape[0]
    cnt = 0
    single = out.shape[0] == 1
    for i in range(lo, hi):
        tx = targets[i, 0]
        ty = targets[i, 1]
        if single:
            ax = 0.0
            ay = 0.0
            for s in range(ns):
                dx = tx - sources[s, 0]
                dy = ty - sources[s, 1]
                r2 = dx * dx + dy * dy
                if r2 == 0.0 or r2 < delta2:
                    cnt += 1
                    continue
                f = wts[s] / r2
                ax -= dy * f
                ay += dx * f
            out[0, i, 0] = scale * ax
            out[0, i, 1] = scale * ay
        else:
            for s in range(ns):
                dx = tx - sources[s, 0]
                dy = ty - sources[s, 1]
                r2 = dx * dx + dy * dy
                if r2 == 0.0 or r2 < delta2:
                    cnt += 1
                    continue
                f = scale * wts[s] / r2
                g = groups[s]
                out[g, i, 0] -= dy * f
                out[g, i, 1] += dx * f
    return cnt


@nb.njit(cache=True, parallel=True)
def bs2d_sum(scale, delta, targets, sources, wts, groups, n_groups):
    """Specialised 2D Biot-Savart sum with scalar source strengths."""
    nt = targets.shape[0]
    out = np.zeros((n_groups, nt, 2))
    nblk = (nt + _BLOCK - 1) // _BLOCK
    dropped = np.zeros(nblk, dtype=np.int64)
    delta2 = delta * delta
    for b in nb.prange(nblk):
        lo = b * _BLOCK
        hi = min(nt, lo + _BLOCK)
        dropped[b] = _bs2d_block(lo, hi, scale, delta2, targets, sources, wts, groups, out)
    return out, dropped.sum()


def kernel_sum(kernel, targets, sources, vecs, delta=None, groups=None, n_groups=1):
    """Sum ``kernel`` contributions of weighted sources at each target.

    ``vecs`` holds the source vectors (weight times vorticity vector).
    Returns ``(out, n_dropped)`` with ``out`` of shape (n_groups, nt, d), or
    (nt, d) when ``groups`` is None.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    sources = np.ascontiguousarray(sources, dtype=np.float64)
    vecs = np.ascontiguousarray(vecs, dtype=np.float64)
    delta = kernel.delta if delta is None else delta
    delta = 0.0 if delta is None else float(delta)
    squeeze = groups is None
    if groups is None:
        groups = np.zeros(sources.shape[0], dtype=np.int64)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    if targets.shape[0] == 0 or sources.shape[0] == 0:
        out = np.zeros((n_groups, targets.shape[0], kernel.d))
        return (out[0] if squeeze else out), 0
    if kernel.kind == BS2D:
        out, dropped = bs2d_sum(kernel.scale, delta, targets, sources,
                                np.ascontiguousarray(vecs[:, 0]), groups, n_groups)
    else:
        out, dropped = pair_sum(kernel.kind, kernel.scale, kernel.power, delta,
                                targets, sources, vecs, groups, n_groups)
    return (out[0] if squeeze else out), int(dropped)
