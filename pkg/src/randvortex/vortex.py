"""Lattice particle systems, vorticity/velocity recovery and PDE checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .kernels import Lattice, SingularKernel, VorticityField, cell_centres
from .rng import normals_block
from .sde import DriftField, grid_nodes, kde_on_grid, simulate_paths, snap_steps
from .summation import kernel_sum

__all__ = [
    "ParticleBlowUp",
    "ParticleSystemState",
    "ParticleRun",
    "FieldGrid",
    "run_particle_system",
    "recover_vorticity",
    "recover_velocity",
    "particle_velocity",
    "pde_residual",
    "half_sample_residual",
    "divergence_check",
    "compare_lamb_oseen",
    "lamb_oseen_omega",
    "lamb_oseen_u_theta",
    "lamb_oseen_fields",
    "radial_profile",
]

MODES = ("mean_field", "empirical_coupled")


class ParticleBlowUp(RuntimeError):
    pass


@dataclass
class ParticleSystemState:
    lattice: Lattice
    N: int
    positions: np.ndarray  # (N, K, d)
    nu: float
    t: float
    seed: int

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0] * self.positions.shape[1]


@dataclass
class ParticleRun:
    """Snapshots X^{n,k}(t) for copies n and lattice points k: positions[i] has shape (N, K, d)."""

    lattice: Lattice
    N: int
    nu: float
    dt: float
    seed: int
    mode: str
    times: np.ndarray
    positions: np.ndarray
    momentum: list = dc_field(default_factory=list)

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 0.5 * self.dt + 1e-12:
            raise KeyError(f"no snapshot at t={t}")
        return i

    def state(self, t: float) -> ParticleSystemState:
        i = self.index_of(t)
        return ParticleSystemState(self.lattice, self.N, self.positions[i], self.nu, float(self.times[i]), self.seed)

    def subset(self, copies) -> "ParticleRun":
        copies = np.asarray(copies)
        return ParticleRun(self.lattice, copies.size, self.nu, self.dt, self.seed, self.mode,
                           self.times, self.positions[:, copies], self.momentum)

    def csv_rows(self):
        d = self.lattice.d
        yield ["t", "copy"] + [f"k{a + 1}" for a in range(d)] + [f"x{a + 1}" for a in range(d)]
        for i, t in enumerate(self.times):
            for n in range(self.N):
                for k in range(self.lattice.size):
                    yield [float(t), n, *map(int, self.lattice.index[k]), *map(float, self.positions[i, n, k])]


def _particle_lattice(omega0: VorticityField, eps: float) -> Lattice:
    lat = omega0.lattice(eps)
    if lat.size == 0:
        # zero data: keep the nodes so that the particles still move
        pts, idx = cell_centres(eps, omega0.support_radius, omega0.d)
        lat = Lattice(eps, pts, idx, np.zeros_like(pts))
    return lat


def run_particle_system(kernel: SingularKernel, omega0: VorticityField, eps: float, N: int, nu: float,
                        dt: float, T: float, seed: int, mode: str = "mean_field",
                        drift: DriftField | None = None, observe_times=None,
                        delta: float | None = None, blowup_factor: float = 100.0) -> ParticleRun:
    """Evolve X^{n,k}, n < N copies, k over the lattice of omega0, by Euler-Maruyama.

    Copy n is driven by one Brownian motion B^n shared by its lattice
    particles.  ``mean_field`` uses the frozen ``drift``; ``empirical_coupled``
    uses sum_j eps^d (1/N) sum_m K(X^{n,k} - X^{m,j}) omega0(y_j), dropping
    the self term and pairs closer than the cutoff.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if N < 1:
        raise ValueError("N must be >= 1")
    if kernel.d != omega0.d:
        raise ValueError("kernel and omega0 dimensions differ")
    lat = _particle_lattice(omega0, eps)
    K, d = lat.size, lat.d
    obs = np.array([T] if observe_times is None else sorted(observe_times), dtype=float)
    steps = snap_steps(obs, dt)
    n_steps = int(steps.max(initial=0))
    limit = blowup_factor * max(omega0.support_radius, 1.0)
    copies = np.repeat(np.arange(N, dtype=np.int64), K)
    starts = np.tile(lat.points, (N, 1))
    momentum = []

    if mode == "mean_field":
        if drift is None and not omega0.is_zero:
            raise ValueError("mean_field mode needs a drift field")
        if drift is not None and drift.d != d:
            raise ValueError("drift dimension does not match omega0")
        batch = simulate_paths(drift, starts, nu, dt, obs, seed, 1, stream_ids=copies)
        pos = batch.positions
        if not np.all(np.isfinite(pos)) or np.max(np.abs(pos), initial=0.0) > limit:
            raise ParticleBlowUp(f"particle left the ball of radius {limit:g}")
    else:
        delta = kernel.cutoff(eps) if delta is None else delta
        vecs = np.tile(lat.weights / N, (N, 1))
        x = starts.copy()
        pos = np.empty((steps.size, N * K, d))
        scale = math.sqrt(2.0 * nu * dt)
        o = 0
        active = np.any(lat.weights)
        for k in range(n_steps + 1):
            while o < steps.size and steps[o] == k:
                pos[o] = x
                o += 1
            if k == n_steps:
                break
            if active:
                b, _ = kernel_sum(kernel, x, x, vecs, delta)
                strength = vecs[:, 0] if d == 2 else np.linalg.norm(vecs, axis=1)
                momentum.append(float(np.max(np.abs(strength @ b))))
            else:
                b = 0.0
            z = normals_block(np.uint64(seed), np.arange(N, dtype=np.int64), k, 1, d)[:, 0]
            x = x + b * dt + scale * z[copies]
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
                raise ParticleBlowUp(f"particle left the ball of radius {limit:g} at step {k + 1}")
    return ParticleRun(lat, N, nu, dt, seed, mode, steps * dt, pos.reshape(steps.size, N, K, d), momentum)


# ---------------------------------------------------------------------------
# fields on grids


@dataclass
class FieldGrid:
    """Values on the nodes of [-R, R]^d with spacing h; ``values`` has shape (n,)*d + (c,)."""

    R: float
    h: float
    d: int
    values: np.ndarray
    t: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[: self.d] != (self.n,) * self.d:
            raise ValueError("values do not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def n(self) -> int:
        return int(round(2 * self.R / self.h)) + 1

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.n)

    @property
    def nodes(self) -> np.ndarray:
        return grid_nodes(self.R, self.h, self.d)

    @property
    def cell(self) -> float:
        return self.h**self.d

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(self.n**self.d, -1)

    @property
    def scalar(self) -> np.ndarray:
        """First component (the 2D scalar vorticity)."""
        return self.values[..., 0]

    def same_grid(self, other: "FieldGrid") -> bool:
        return self.d == other.d and self.n == other.n and abs(self.R - other.R) < 1e-12 and abs(self.h - other.h) < 1e-12

    def scaled(self, factor: float) -> "FieldGrid":
        return FieldGrid(self.R, self.h, self.d, self.values * factor, self.t, dict(self.meta))

    def total(self) -> np.ndarray:
        return self.flat.sum(axis=0) * self.cell

    @classmethod
    def from_function(cls, func, R, h, d, t=0.0) -> "FieldGrid":
        x = grid_nodes(R, h, d)
        vals = np.asarray(func(x), dtype=float).reshape(x.shape[0], -1)
        n = int(round(2 * R / h)) + 1
        return cls(R, h, d, vals.reshape((n,) * d + (vals.shape[1],)), t)


def pooled_bandwidth(positions, multiplier: float = 1.0) -> np.ndarray:
    """Rule-of-thumb bandwidth from the within-cloud spread pooled over lattice points.

    ``positions`` has shape (N, K, d); the variance of each lattice point's
    cloud is averaged over k, and the sample size in the rate is N.
    """
    N = positions.shape[0]
    var = positions.var(axis=0, ddof=1).mean(axis=0)
    if not np.all(var > 0):
        raise ValueError("degenerate particle clouds: zero spread")
    d = positions.shape[2]
    return multiplier * np.sqrt(var) * N ** (-1.0 / (d + 4))


def recover_vorticity(state: ParticleSystemState, R: float, h: float, bandwidth=None,
                      multiplier: float = 1.0, min_copies: int = 1000) -> FieldGrid:
    """omega(x, t) = sum_k eps^d omega0(y_k) * KDE of the copies of X(y_k, t) at x."""
    pos = state.positions
    N, K, d = pos.shape
    n = int(round(2 * R / h)) + 1
    lat = state.lattice
    if not np.any(lat.weights):
        return FieldGrid(R, h, d, np.zeros((n,) * d + (d,)), state.t, {"bandwidth": None})
    if N < min_copies:
        raise ValueError(f"vorticity recovery by KDE needs N >= {min_copies} copies")
    bw = pooled_bandwidth(pos, multiplier) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,))
    axis = np.linspace(-R, R, n)
    flat = pos.reshape(N * K, d)
    vals = np.zeros((n,) * d + (d,))
    for c in range(d):
        w = np.tile(lat.weights[:, c], N) / N
        if np.any(w):
            vals[..., c] = kde_on_grid(flat, w, axis, bw)
    return FieldGrid(R, h, d, vals, state.t, {"bandwidth": np.asarray(bw).tolist()})


def recover_velocity(omega: FieldGrid, kernel: SingularKernel, delta: float | None = None) -> FieldGrid:
    """u(x) = sum over grid cells of K(x - x_c) omega(x_c) h^d (cell-midpoint rule, self cell dropped)."""
    if kernel.d != omega.d:
        raise ValueError("kernel and field dimensions differ")
    delta = omega.h / 4.0 if delta is None else delta
    nodes = omega.nodes
    vecs = omega.flat[:, : omega.d] * omega.cell
    live = np.any(vecs != 0, axis=1)
    out = np.zeros((nodes.shape[0], omega.d))
    if np.any(live):
        out, _ = kernel_sum(kernel, nodes, nodes[live], vecs[live], delta)
    return FieldGrid(omega.R, omega.h, omega.d, out.reshape((omega.n,) * omega.d + (omega.d,)), omega.t)


def particle_velocity(state: ParticleSystemState, kernel: SingularKernel, R: float, h: float,
                      delta: float | None = None) -> FieldGrid:
    """u(x) = sum_k eps^d (1/N) sum_n K(x - X^{n,k}) omega0(y_k) evaluated at the grid nodes."""
    N, K, d = state.positions.shape
    delta = kernel.cutoff(state.lattice.eps) if delta is None else delta
    nodes = grid_nodes(R, h, d)
    vecs = np.tile(state.lattice.weights / N, (N, 1))
    out, _ = kernel_sum(kernel, nodes, state.positions.reshape(N * K, d), vecs, delta)
    n = int(round(2 * R / h)) + 1
    return FieldGrid(R, h, d, out.reshape((n,) * d + (d,)), state.t)


# ---------------------------------------------------------------------------
# finite differences


def _interior(d):
    return (slice(1, -1),) * d


def _central(f, a, d, h):
    """Central difference along spatial axis a of f (d spatial axes first), interior nodes."""
    hi = [slice(1, -1)] * d
    lo = list(hi)
    hi[a] = slice(2, None)
    lo[a] = slice(None, -2)
    return (f[tuple(hi)] - f[tuple(lo)]) / (2 * h)


def _laplacian(f, d, h):
    core = f[_interior(d)]
    out = np.zeros_like(core)
    for a in range(d):
        hi = [slice(1, -1)] * d
        lo = list(hi)
        hi[a] = slice(2, None)
        lo[a] = slice(None, -2)
        out += (f[tuple(hi)] - 2 * core + f[tuple(lo)]) / h**2
    return out


@dataclass
class ResidualReport:
    residual: np.ndarray
    l2: float
    sup: float
    h: float
    d: int


def pde_residual(w_prev: FieldGrid, w_mid: FieldGrid, w_next: FieldGrid, u: FieldGrid, nu: float,
                 dt_snap: float) -> ResidualReport:
    """d omega/dt + u . grad omega - nu Lap omega + (div u) omega on interior nodes.

    Central differences in time (snapshots dt_snap apart) and space.
    """
    for g in (w_prev, w_next, u):
        if not w_mid.same_grid(g):
            raise ValueError("snapshots and velocity must share one grid")
    d, h = w_mid.d, w_mid.h
    # scalar vorticity in 2D, every component otherwise
    comps = [0] if d == 2 else list(range(d))
    W = w_mid.values[..., comps]
    U = u.values[..., :d]
    core = _interior(d)
    res = (w_next.values[..., comps][core] - w_prev.values[..., comps][core]) / (2 * dt_snap)
    div = np.zeros(W[core].shape[:-1])
    for a in range(d):
        res += U[core][..., a : a + 1] * _central(W, a, d, h)
        div += _central(U[..., a], a, d, h)
    res += div[..., None] * W[core]
    res -= nu * _laplacian(W, d, h)
    l2 = float(np.sqrt(np.sum(res**2) * h**d))
    return ResidualReport(res, l2, float(np.max(np.abs(res), initial=0.0)), h, d)


def half_sample_residual(run: ParticleRun, t: float, dt_snap: float, kernel: SingularKernel, R: float,
                         h: float, multiplier: float = 1.0):
    """Residual from the full run and its even/odd-copy halves with a common bandwidth.

    The bandwidth is fixed from the middle snapshot of the full run, so the
    same Gaussian smoothing applies to every snapshot.  Returns
    (full report, noise = ||R_even - R_odd|| / 2, snapshots, u).
    """
    bw = pooled_bandwidth(run.state(t).positions, multiplier)
    if run.N < 1000:
        raise ValueError("vorticity recovery by KDE needs N >= 1000 copies")

    def fields(r):
        # the halves inherit the sample-size check of the full run
        ws = [recover_vorticity(r.state(s), R, h, bw, min_copies=1) for s in (t - dt_snap, t, t + dt_snap)]
        return ws, recover_velocity(ws[1], kernel)

    ws, u = fields(run)
    full = pde_residual(*ws, u, run.nu, dt_snap)
    halves = []
    for part in (np.arange(0, run.N, 2), np.arange(1, run.N, 2)):
        hw, hu = fields(run.subset(part))
        halves.append(pde_residual(*hw, hu, run.nu, dt_snap))
    noise = float(np.sqrt(np.sum((halves[0].residual - halves[1].residual) ** 2) * h**full.d)) / 2.0
    return full, noise, ws, u


@dataclass(frozen=True)
class DivergenceReport:
    max_div: float
    l2_div: float
    max_grad: float


def divergence_check(u: FieldGrid) -> DivergenceReport:
    """Central-difference divergence over interior nodes, with max |grad u| for scale."""
    d, h = u.d, u.h
    U = u.values[..., :d]
    div = np.zeros(U[_interior(d)].shape[:-1])
    grad = np.zeros_like(div)
    for a in range(d):
        g = _central(U, a, d, h)
        div += g[..., a]
        grad = np.maximum(grad, np.max(np.abs(g), axis=-1))
    return DivergenceReport(float(np.max(np.abs(div), initial=0.0)), float(np.sqrt(np.sum(div**2) * h**d)),
                            float(np.max(grad, initial=0.0)))


# ---------------------------------------------------------------------------
# Lamb-Oseen reference


def lamb_oseen_omega(r, t, circulation=1.0, t0=1.0, nu=0.5):
    s = 4.0 * nu * (t + t0)
    return circulation / (math.pi * s) * np.exp(-np.asarray(r, dtype=float) ** 2 / s)


def lamb_oseen_u_theta(r, t, circulation=1.0, t0=1.0, nu=0.5):
    r = np.asarray(r, dtype=float)
    s = 4.0 * nu * (t + t0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = circulation / (2 * math.pi * r) * -np.expm1(-r * r / s)
    return np.where(r > 0, u, 0.0)


def lamb_oseen_fields(R, h, t, circulation=1.0, t0=1.0, nu=0.5):
    """Exact (omega, u) sampled on the grid."""
    def w(x):
        out = np.zeros_like(x)
        out[:, 0] = lamb_oseen_omega(np.linalg.norm(x, axis=1), t, circulation, t0, nu)
        return out

    def v(x):
        r = np.linalg.norm(x, axis=1)
        ut = lamb_oseen_u_theta(r, t, circulation, t0, nu)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(r > 0, ut / r, 0.0)
        return np.stack([-x[:, 1] * f, x[:, 0] * f], axis=1)

    return FieldGrid.from_function(w, R, h, 2, t), FieldGrid.from_function(v, R, h, 2, t)


@dataclass(frozen=True)
class LambOseenErrors:
    omega_l1: float
    u_l2: float
    peak_error: float


def compare_lamb_oseen(omega: FieldGrid, u: FieldGrid, circulation: float, t0: float, nu: float, t: float,
                       r_range=(0.2, 3.0)) -> LambOseenErrors:
    """Relative L1 vorticity error (whole grid), relative L2 velocity error on the annulus
    r_range, and distance of the vorticity peak from the origin."""
    if omega.d != 2 or u.d != 2:
        raise ValueError("Lamb-Oseen comparison needs d = 2 fields")
    w_ex, u_ex = lamb_oseen_fields(omega.R, omega.h, t, circulation, t0, nu)
    ew = np.sum(np.abs(omega.scalar - w_ex.scalar)) / np.sum(np.abs(w_ex.scalar))
    x = u.nodes
    r = np.linalg.norm(x, axis=1)
    m = (r >= r_range[0]) & (r <= r_range[1])
    ue = u_ex.flat[m]
    eu = np.sqrt(np.sum((u.flat[m, :2] - ue) ** 2) / np.sum(ue**2))
    peak = omega.nodes[int(np.argmax(omega.scalar.ravel()))]
    return LambOseenErrors(float(ew), float(eu), float(np.linalg.norm(peak)))


def radial_profile(omega: FieldGrid, u: FieldGrid, t, circulation=1.0, t0=1.0, nu=0.5, n_bins=None):
    """Rows (r, omega, omega_exact, u_theta, u_exact) from bin-averaged grid values."""
    x = omega.nodes
    r = np.linalg.norm(x, axis=1)
    n_bins = n_bins or int(omega.R / omega.h)
    edges = np.linspace(0.0, omega.R, n_bins + 1)
    w = omega.flat[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ut = np.where(r > 0, (x[:, 0] * u.flat[:, 1] - x[:, 1] * u.flat[:, 0]) / r, 0.0)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (r >= lo) & (r < hi)
        if not np.any(m):
            continue
        rm = float(r[m].mean())
        rows.append((rm, float(w[m].mean()), float(lamb_oseen_omega(rm, t, circulation, t0, nu)),
                     float(ut[m].mean()), float(lamb_oseen_u_theta(rm, t, circulation, t0, nu))))
    return rows
