"""Euler-Maruyama diffusions on gridded drift fields, Cameron-Martin weights,
Feynman-Kac estimators and kernel density estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .rng import fill_normals, normals_block

__all__ = [
    "DriftField",
    "PathBatch",
    "CMWeight",
    "FKResult",
    "simulate_paths",
    "brownian_increments",
    "cameron_martin_weight",
    "cameron_martin_log_weights",
    "feynman_kac_expectation",
    "to_unit_diffusion",
    "from_unit_diffusion",
    "kde_bandwidth",
    "kde_on_grid",
    "density_kde",
]

_TIME_TOL = 1e-9


# ---------------------------------------------------------------------------
# drift fields


@nb.njit(cache=True)
def _interp_one(values, lo, h, n, dtg, nt, active, x, t, out):
    d = x.shape[0]
    for a in range(d):
        out[a] = 0.0
    if not active:
        return
    it = int(math.floor(t / dtg + _TIME_TOL)) if dtg > 0 else 0
    if it < 0:
        it = 0
    if it > nt - 1:
        it = nt - 1
    base = 0
    stride = 1
    idx = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    for a in range(d - 1, -1, -1):
        u = (x[a] - lo) / h
        if u < 0.0 or u > n - 1:
            return
        i = int(math.floor(u))
        if i > n - 2:
            i = n - 2
        idx[a] = i
        frac[a] = u - i
        base += i * stride
        stride *= n
    for c in range(1 << d):
        w = 1.0
        off = 0
        s = 1
        for a in range(d - 1, -1, -1):
            if (c >> a) & 1:
                w *= frac[a]
                off += s
            else:
                w *= 1.0 - frac[a]
            s *= n
        if w != 0.0:
            for b in range(d):
                out[b] += w * values[it, base + off, b]


@nb.njit(cache=True, parallel=True)
def _interp_many(values, lo, h, n, dtg, nt, active, xs, t):
    m, d = xs.shape
    out = np.empty((m, d))
    for p in nb.prange(m):
        _interp_one(values, lo, h, n, dtg, nt, active, xs[p], t, out[p])
    return out


@dataclass
class DriftField:
    """Vector field on the box [-R, R]^d (spacing h) and times k * dt_grid, k = 0..nt-1.

    Multilinear in space, left-constant in time, zero outside the box.
    ``values`` has shape (nt, n**d, d) with C-ordered spatial nodes.
    """

    R: float
    h: float
    dt_grid: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("values must have shape (nt, n**d, d)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("drift values must be finite")
        n = self.n
        if n ** self.d != self.values.shape[1]:
            raise ValueError("value array does not match the spatial grid")

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def n(self) -> int:
        return int(round(2 * self.R / self.h)) + 1

    @property
    def nt(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> float:
        return (self.nt - 1) * self.dt_grid

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt_grid

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.n)

    @property
    def nodes(self) -> np.ndarray:
        return grid_nodes(self.R, self.h, self.d)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1), initial=0.0))

    def node_values(self, k: int) -> np.ndarray:
        """Values at time slice k reshaped to (n, ..., n, d)."""
        return self.values[k].reshape((self.n,) * self.d + (self.d,))

    def evaluate(self, x, t: float) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        return _interp_many(self.values, -self.R, self.h, self.n, self.dt_grid, self.nt, True, x, float(t))

    def with_values(self, values) -> "DriftField":
        return DriftField(self.R, self.h, self.dt_grid, values)

    def sup_diff(self, other: "DriftField") -> float:
        if self.values.shape != other.values.shape:
            raise ValueError("drift fields live on different grids")
        return float(np.max(np.linalg.norm(self.values - other.values, axis=-1), initial=0.0))

    @classmethod
    def zeros(cls, R, h, T, dt_grid, d) -> "DriftField":
        nt = n_time_slices(T, dt_grid)
        n = int(round(2 * R / h)) + 1
        return cls(R, h, dt_grid, np.zeros((nt, n**d, d)))

    @classmethod
    def from_function(cls, func, R, h, T, dt_grid, d) -> "DriftField":
        """Sample func(x, t) -> (m, d) at every node and slice."""
        z = cls.zeros(R, h, T, dt_grid, d)
        x = z.nodes
        vals = np.stack([np.asarray(func(x, t), dtype=float).reshape(x.shape) for t in z.times])
        return cls(R, h, dt_grid, vals)

    @classmethod
    def constant(cls, vec, R, h, T, dt_grid) -> "DriftField":
        vec = np.asarray(vec, dtype=float)
        return cls.from_function(lambda x, t: np.broadcast_to(vec, x.shape), R, h, T, dt_grid, vec.size)


def n_time_slices(T: float, dt_grid: float) -> int:
    if not dt_grid > 0 or T < 0:
        raise ValueError("need dt_grid > 0 and T >= 0")
    m = T / dt_grid
    k = int(round(m))
    if abs(m - k) > 1e-6 * max(1.0, m):
        raise ValueError(f"T={T} is not a multiple of dt_grid={dt_grid}")
    return k + 1


def grid_nodes(R: float, h: float, d: int) -> np.ndarray:
    n = int(round(2 * R / h)) + 1
    ax = np.linspace(-R, R, n)
    g = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


_ZERO_VALUES = {}


def _drift_args(b: DriftField | None, d: int):
    if b is None:
        if d not in _ZERO_VALUES:
            _ZERO_VALUES[d] = np.zeros((1, 2**d, d))
        return _ZERO_VALUES[d], -1.0, 2.0, 2, 1.0, 1, False
    if b.d != d:
        raise ValueError(f"drift dimension {b.d} does not match start points of dimension {d}")
    return b.values, -b.R, b.h, b.n, b.dt_grid, b.nt, True


# ---------------------------------------------------------------------------
# path simulation


@nb.njit(cache=True, parallel=True)
def _euler_paths(values, lo, h, n, dtg, nt, active, starts, streams, seed, dt, n_steps,
                 noise_scale, substeps, obs_steps, out):
    n_paths, d = starts.shape
    n_obs = obs_steps.shape[0]
    for p in nb.prange(n_paths):
        x = starts[p].copy()
        drift = np.empty(d)
        buf = np.empty(d)
        acc = np.empty(d)
        o = 0
        for k in range(n_steps + 1):
            while o < n_obs and obs_steps[o] == k:
                for a in range(d):
                    out[o, p, a] = x[a]
                o += 1
            if k == n_steps:
                break
            _interp_one(values, lo, h, n, dtg, nt, active, x, k * dt, drift)
            for a in range(d):
                acc[a] = 0.0
            for j in range(substeps):
                fill_normals(seed, streams[p], k * substeps + j, buf)
                for a in range(d):
                    acc[a] += buf[a]
            for a in range(d):
                x[a] += drift[a] * dt + noise_scale * acc[a]


@dataclass
class PathBatch:
    """Positions of simulated paths at the observation times.

    ``positions`` has shape (n_obs, n_paths, d); path p started at
    ``starts[start_ids[p]]`` and is driven by noise stream ``streams[p]``.
    """

    starts: np.ndarray
    start_ids: np.ndarray
    path_ids: np.ndarray
    streams: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    nu: float
    dt: float
    seed: int

    @property
    def n_paths(self) -> int:
        return self.positions.shape[1]

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 0.5 * self.dt + 1e-12:
            raise KeyError(f"time {t} was not observed")
        return self.positions[i]

    def csv_rows(self):
        d = self.positions.shape[2]
        yield ["path_id", "start_id", "t"] + [f"x{a + 1}" for a in range(d)]
        for i, t in enumerate(self.times):
            for p in range(self.n_paths):
                yield [int(self.path_ids[p]), int(self.start_ids[p]), float(t), *map(float, self.positions[i, p])]


def snap_steps(times, dt: float) -> np.ndarray:
    steps = np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64)
    if np.any(steps < 0):
        raise ValueError("observation times must be nonnegative")
    return steps


def simulate_paths(b: DriftField | None, starts, nu: float, dt: float, observe_times, seed: int,
                   n_paths_per_start: int = 1, stream_ids=None, brownian_substeps: int = 1,
                   stream_offset: int = 0) -> PathBatch:
    """Euler-Maruyama for dX = b(X, t) dt + sqrt(2 nu) dB.

    Path p = start_index * n_paths_per_start + m reads noise stream
    ``stream_offset + p`` unless ``stream_ids`` is given.  With
    ``brownian_substeps = s`` each increment is the sum of s finer ones, so
    runs at dt and dt/s share one Brownian path.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not nu > 0:
        raise ValueError("nu must be positive")
    if n_paths_per_start < 1 or brownian_substeps < 1:
        raise ValueError("n_paths_per_start and brownian_substeps must be >= 1")
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    d = starts.shape[1]
    obs_t = np.sort(np.atleast_1d(np.asarray(observe_times, dtype=float)))
    if b is not None and obs_t.size and obs_t[-1] > b.T * (1 + 1e-9) + 1e-12:
        raise ValueError(f"observation time {obs_t[-1]} beyond the drift horizon T={b.T}")
    steps = snap_steps(obs_t, dt)
    n_steps = int(steps.max(initial=0))
    start_ids = np.repeat(np.arange(starts.shape[0], dtype=np.int64), n_paths_per_start)
    path_ids = np.arange(start_ids.size, dtype=np.int64)
    streams = path_ids + stream_offset if stream_ids is None else np.asarray(stream_ids, dtype=np.int64)
    if streams.shape != path_ids.shape:
        raise ValueError("need one stream id per path")
    x0 = np.ascontiguousarray(starts[start_ids])
    out = np.empty((steps.size, x0.shape[0], d))
    args = _drift_args(b, d)
    scale = math.sqrt(2.0 * nu * dt / brownian_substeps)
    _euler_paths(*args, x0, streams, np.uint64(seed), dt, n_steps, scale, brownian_substeps, steps, out)
    return PathBatch(starts, start_ids, path_ids, streams, steps * dt, out, nu, dt, seed)


def brownian_increments(seed: int, streams, n_steps: int, dt: float, d: int) -> np.ndarray:
    """Standard Brownian increments, shape (n_paths, n_steps, d), same streams as simulate_paths."""
    z = normals_block(np.uint64(seed), np.asarray(streams, dtype=np.int64), 0, n_steps, d)
    return z * math.sqrt(dt)


# ---------------------------------------------------------------------------
# change of measure


def to_unit_diffusion(b: DriftField, nu: float) -> DriftField:
    """Drift b / sqrt(2 nu) that drives W = (X - x) / sqrt(2 nu) at unit diffusion."""
    return b.with_values(b.values / math.sqrt(2.0 * nu))


def from_unit_diffusion(b: DriftField, nu: float) -> DriftField:
    return b.with_values(b.values * math.sqrt(2.0 * nu))


@dataclass(frozen=True)
class CMWeight:
    """Cameron-Martin weight R = exp(N) with N = stochastic - quadratic."""

    stochastic: float
    quadratic: float

    @property
    def log_value(self) -> float:
        return self.stochastic - self.quadratic

    @property
    def value(self) -> float:
        return math.exp(self.log_value)


@nb.njit(cache=True, parallel=True)
def _cm_accumulate(values, lo, h, n, dtg, nt, active, x0, incs, dt, step0, scale, obs_steps, stoch, quad):
    n_paths, n_steps, d = incs.shape
    n_obs = obs_steps.shape[0]
    for p in nb.prange(n_paths):
        pos = x0[p].copy()
        bv = np.empty(d)
        s = 0.0
        q = 0.0
        o = 0
        for k in range(n_steps + 1):
            while o < n_obs and obs_steps[o] == k:
                stoch[o, p] = s
                quad[o, p] = q
                o += 1
            if k == n_steps:
                break
            _interp_one(values, lo, h, n, dtg, nt, active, pos, (step0 + k) * dt, bv)
            for a in range(d):
                bt = bv[a] / scale
                s += bt * incs[p, k, a]
                q += 0.5 * bt * bt * dt
                pos[a] += scale * incs[p, k, a]


def cameron_martin_log_weights(b: DriftField | None, x0, increments, dt: float, nu: float = 0.5,
                               tau: float = 0.0, observe_steps=None):
    """Stochastic and quadratic parts of N_b along Brownian paths started at ``x0``.

    ``increments`` (n_paths, n_steps, d) are standard Brownian increments of
    W over [tau, tau + n_steps dt]; the path visited is x0 + sqrt(2 nu) W and
    the drift enters as b / sqrt(2 nu) (left-point Ito sums).  Returns arrays
    of shape (n_obs, n_paths) for the requested step counts (default: last).
    """
    incs = np.ascontiguousarray(increments, dtype=np.float64)
    if incs.ndim == 2:
        incs = incs[None]
    n_paths, n_steps, d = incs.shape
    x0 = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, d)))
    obs = np.array([n_steps] if observe_steps is None else observe_steps, dtype=np.int64)
    stoch = np.zeros((obs.size, n_paths))
    quad = np.zeros((obs.size, n_paths))
    step0 = int(round(tau / dt))
    _cm_accumulate(*_drift_args(b, d), x0, incs, dt, step0, math.sqrt(2.0 * nu), obs, stoch, quad)
    return stoch, quad


def cameron_martin_weight(increments, b: DriftField | None, tau: float, x, t: float, dt: float | None = None,
                          nu: float = 0.5) -> CMWeight:
    """Weight R_b(tau, x, t) for one path given its Brownian increments on [tau, t]."""
    incs = np.atleast_2d(np.asarray(increments, dtype=float))
    n_steps = incs.shape[0]
    if dt is None:
        dt = (t - tau) / n_steps
    if abs(n_steps * dt - (t - tau)) > 1e-9 * max(1.0, t):
        raise ValueError("increments do not cover [tau, t]")
    s, q = cameron_martin_log_weights(b, x, incs[None], dt, nu, tau)
    return CMWeight(float(s[0, 0]), float(q[0, 0]))


@dataclass(frozen=True)
class FKResult:
    estimate: np.ndarray | float
    std_error: np.ndarray | float


def feynman_kac_expectation(f, b: DriftField | None, tau: float, x, t: float, n_paths: int, seed: int,
                            dt: float = 0.01, nu: float = 0.5) -> FKResult:
    """E f(X_t) for the diffusion from (tau, x) as E[R_b f(x + sqrt(2 nu)(W_t - W_tau))].

    ``f`` maps an (n, d) array to (n,) or (n, k).
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    x = np.asarray(x, dtype=float)
    d = x.size
    n_steps = int(round((t - tau) / dt))
    if n_steps < 1:
        raise ValueError("need t > tau")
    incs = brownian_increments(seed, np.arange(n_paths), n_steps, dt, d)
    s, q = cameron_martin_log_weights(b, x, incs, dt, nu, tau)
    w = np.exp(s[0] - q[0])
    end = x[None, :] + math.sqrt(2.0 * nu) * incs.sum(axis=1)
    vals = np.asarray(f(end), dtype=float)
    wv = w.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals
    est = wv.mean(axis=0)
    se = wv.std(axis=0, ddof=1) / math.sqrt(n_paths)
    if est.ndim == 0:
        return FKResult(float(est), float(se))
    return FKResult(est, se)


# ---------------------------------------------------------------------------
# kernel density estimation


def kde_bandwidth(samples, multiplier: float = 1.0, n_eff: int | None = None) -> np.ndarray:
    """Per-coordinate rule of thumb multiplier * sigma_hat * n^(-1/(d+4))."""
    x = np.atleast_2d(samples)
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    if not np.all(sd > 0):
        raise ValueError("degenerate sample: zero variance in some coordinate")
    n = n if n_eff is None else n_eff
    return multiplier * sd * n ** (-1.0 / (d + 4))


def _axis_weights(coord, axis, bw, chunk):
    z = (axis[None, :] - coord[:, None]) / bw
    return np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * bw)


def kde_on_grid(samples, weights, axis, bandwidth, chunk: int = 20000) -> np.ndarray:
    """sum_s weights_s prod_a phi_{h_a}(x_a - s_a) on the tensor grid ``axis``^d.

    Separable: each chunk contributes an outer product of per-axis Gaussian
    weight matrices.  Returns an array of shape (n,)*d.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    if not np.all(bw > 0):
        raise ValueError("bandwidth must be positive")
    axis = np.asarray(axis, dtype=float)
    out = np.zeros((axis.size,) * d)
    letters = "abcdefgh"[:d]
    spec = ",".join(f"s{c}" for c in letters) + ",s->" + letters
    for lo in range(0, n, chunk):
        sl = slice(lo, lo + chunk)
        mats = [_axis_weights(x[sl, a], axis, bw[a], chunk) for a in range(d)]
        if d == 1:
            out += w[sl] @ mats[0]
        elif d == 2:
            out += (mats[0] * w[sl, None]).T @ mats[1]
        else:
            out += np.einsum(spec, *mats, w[sl], optimize=True)
    return out


def density_kde(batch: PathBatch, observe_time: float, axis, multiplier: float = 1.0,
                bandwidth=None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian product KDE of the paths observed at ``observe_time``.

    Returns (density on the grid, bandwidth used).
    """
    x = batch.at(observe_time)
    if x.shape[0] < 1000:
        raise ValueError("density_kde needs at least 1000 paths")
    bw = kde_bandwidth(x, multiplier) if bandwidth is None else np.broadcast_to(bandwidth, (x.shape[1],))
    return kde_on_grid(x, 1.0 / x.shape[0], axis, bw), np.asarray(bw, dtype=float)
