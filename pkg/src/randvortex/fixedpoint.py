"""The map b -> K<>b on gridded drift fields and its Picard iteration."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .kernels import SingularKernel, VorticityField
from .rng import substream_seed
from .sde import DriftField, brownian_increments, cameron_martin_log_weights, simulate_paths
from .summation import kernel_sum

__all__ = [
    "DiamondConfig",
    "DiamondResult",
    "PicardState",
    "PicardError",
    "apply_K_diamond",
    "picard_solve",
    "noise_floor",
    "contraction_diagnostics",
    "hoelder_modulus",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("direct_simulation", "cameron_martin_weighted")


@dataclass(frozen=True)
class DiamondConfig:
    eps: float
    M: int
    dt: float
    seed: int = 0
    estimator: str = "direct_simulation"
    n_groups: int = 10
    delta: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("lattice mesh eps must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.dt > 0:
            raise ValueError("solver step dt must be positive")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")

    def with_seed(self, seed: int) -> "DiamondConfig":
        return DiamondConfig(self.eps, self.M, self.dt, seed, self.estimator, self.n_groups, self.delta)


@dataclass
class DiamondResult:
    """Output field plus batch-means standard errors per (slice, node, component)."""

    field: DriftField
    std_error: np.ndarray
    dropped_fraction: float

    @property
    def noise_sup(self) -> float:
        return float(np.max(np.linalg.norm(self.std_error, axis=-1), initial=0.0))


def _slice_steps(b: DriftField, dt: float) -> np.ndarray:
    steps = np.rint(b.times / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - b.times) > 1e-9 * max(1.0, b.T)):
        raise ValueError("grid times must be multiples of the solver step dt")
    return steps


def _grouped_sum(kernel, nodes, src, vecs, delta, groups, n_groups):
    out, dropped = kernel_sum(kernel, nodes, src, vecs, delta, groups, n_groups)
    est = out.sum(axis=0)
    if n_groups > 1:
        se = (n_groups * out).std(axis=0, ddof=1) / math.sqrt(n_groups)
    else:
        se = np.zeros_like(est)
    return est, se, dropped


def apply_K_diamond(b: DriftField, kernel: SingularKernel, omega0: VorticityField, nu: float,
                    cfg: DiamondConfig, lattice=None) -> DiamondResult:
    """Monte Carlo estimate of (K<>b)(x, t) on the grid of ``b``.

    Each lattice point y_k launches M diffusions (one path observed at every
    grid time); the field is sum_k eps^d (1/M) sum_m K(x - Z_m(y_k, t)) omega0(y_k),
    with pairs closer than the cutoff dropped.  The Cameron-Martin estimator
    replaces the diffusions by Brownian paths reweighted by R_b.
    """
    if kernel.d != b.d or omega0.d != b.d:
        raise ValueError(f"dimension mismatch: kernel {kernel.d}, omega0 {omega0.d}, drift {b.d}")
    lattice = omega0.lattice(cfg.eps) if lattice is None else lattice
    zero = DiamondResult(b.with_values(np.zeros_like(b.values)), np.zeros_like(b.values), 0.0)
    if lattice.size == 0 or not np.any(lattice.weights):
        return zero
    delta = kernel.cutoff(cfg.eps) if cfg.delta is None else cfg.delta
    nodes = b.nodes
    steps = _slice_steps(b, cfg.dt)
    K, M, d = lattice.size, cfg.M, b.d
    G = min(cfg.n_groups, M)
    groups = np.tile(np.arange(M, dtype=np.int64) % G, K)
    base_vecs = np.repeat(lattice.weights / M, M, axis=0)
    out = np.zeros_like(b.values)
    se = np.zeros_like(b.values)
    dropped = 0
    pairs = 0

    if cfg.estimator == "direct_simulation":
        batch = simulate_paths(b, lattice.points, nu, cfg.dt, b.times, cfg.seed, M)
        positions = batch.positions
        weights = None
    else:
        n_steps = int(steps.max())
        incs = brownian_increments(cfg.seed, np.arange(K * M), n_steps, cfg.dt, d)
        starts = np.repeat(lattice.points, M, axis=0)
        walk = np.concatenate([np.zeros((K * M, 1, d)), np.cumsum(incs, axis=1)], axis=1)
        positions = starts[None] + math.sqrt(2.0 * nu) * np.moveaxis(walk[:, steps], 1, 0)
        s, q = cameron_martin_log_weights(b, starts, incs, cfg.dt, nu, 0.0, steps)
        weights = np.exp(s - q)
        del walk, incs

    for j, step in enumerate(steps):
        if step == 0:
            # every path still sits at its lattice point
            vals, nd = kernel_sum(kernel, nodes, lattice.points, lattice.weights, delta)
            out[j] = vals
            dropped += nd * M
        else:
            vecs = base_vecs if weights is None else base_vecs * weights[j][:, None]
            out[j], se[j], nd = _grouped_sum(kernel, nodes, positions[j], vecs, delta, groups, G)
            dropped += nd
        pairs += nodes.shape[0] * K * M
    frac = dropped / pairs if pairs else 0.0
    if frac > 0.01:
        log.warning("K<>b dropped %.2f%% of pair terms below the singular cutoff", 100 * frac)
    return DiamondResult(b.with_values(out), se, frac)


def noise_floor(b: DriftField, kernel, omega0, nu, cfg: DiamondConfig, lattice=None,
                first: DriftField | None = None) -> float:
    """Grid-sup difference of K<>b under two independent seeds."""
    a = apply_K_diamond(b, kernel, omega0, nu, cfg, lattice).field if first is None else first
    c = apply_K_diamond(b, kernel, omega0, nu, cfg.with_seed(substream_seed(cfg.seed, "noise-floor")), lattice).field
    return a.sup_diff(c)


@dataclass
class PicardState:
    """Iteration history; ``ratios[n]`` is NaN when r_{n-1} was within 10x the noise floor."""

    n: int = 0
    field: DriftField | None = None
    residuals: list = dc_field(default_factory=list)
    ratios: list = dc_field(default_factory=list)
    sup_norms: list = dc_field(default_factory=list)
    seconds: list = dc_field(default_factory=list)
    noise_floor: float = 0.0
    tol_fp: float = 0.0
    converged: bool = False
    fresh_residual: float = math.nan
    certified: bool = False
    in_contraction_regime: bool = True
    warnings: list = dc_field(default_factory=list)

    def recorded_ratios(self) -> np.ndarray:
        r = np.asarray(self.ratios, dtype=float)
        return r[np.isfinite(r)]

    def csv_rows(self):
        yield ["iter", "residual", "ratio", "sup_norm", "seconds"]
        for i, (r, q, s, w) in enumerate(zip(self.residuals, self.ratios, self.sup_norms, self.seconds)):
            yield [i + 1, r, q, s, w]


class PicardError(RuntimeError):
    def __init__(self, message: str, state: PicardState, kind: str = "nonconvergence"):
        super().__init__(message)
        self.state = state
        self.kind = kind


def picard_solve(kernel: SingularKernel, omega0: VorticityField, nu: float, T: float, grid: dict,
                 cfg: DiamondConfig, tol_fp: float | None = None, max_iter: int = 8,
                 T_L: float | None = None, certify: bool = True):
    """Iterate b_{n+1} = K<>b_n from b_0 = 0 with common random numbers.

    ``grid`` holds R, h and dt_grid.  ``tol_fp`` defaults to the two-seed
    noise floor of the first iterate.  Returns (b*, state); raises
    PicardError on NaN or when max_iter is exhausted.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    state = PicardState()
    if T_L is not None and T > T_L * (1 + 1e-12):
        state.in_contraction_regime = False
        msg = f"T={T:.6g} exceeds T_L={T_L:.6g}; contraction is not guaranteed"
        state.warnings.append(msg)
        log.warning(msg)
    lattice = omega0.lattice(cfg.eps)
    b = DriftField.zeros(grid["R"], grid["h"], T, grid["dt_grid"], kernel.d)
    state.field = b
    prev_r = None
    for n in range(max_iter):
        t0 = time.perf_counter()
        nxt = apply_K_diamond(b, kernel, omega0, nu, cfg, lattice).field
        if not np.all(np.isfinite(nxt.values)):
            raise PicardError(f"NaN in iterate {n + 1}", state, "nan")
        if n == 0:
            state.noise_floor = noise_floor(b, kernel, omega0, nu, cfg, lattice, first=nxt)
            state.tol_fp = state.noise_floor if tol_fp is None else float(tol_fp)
            if state.tol_fp < state.noise_floor:
                state.warnings.append("tol_fp is below the estimated noise floor")
        r = b.sup_diff(nxt)
        ratio = r / prev_r if prev_r is not None and prev_r > 10 * state.noise_floor else math.nan
        state.residuals.append(r)
        state.ratios.append(ratio)
        state.sup_norms.append(nxt.sup_norm)
        state.seconds.append(time.perf_counter() - t0)
        state.n = n + 1
        b = nxt
        state.field = b
        prev_r = r
        if r <= state.tol_fp:
            state.converged = True
            break
    if not state.converged:
        raise PicardError(f"no convergence after {max_iter} iterations; ratios {state.ratios}", state)
    if certify:
        fresh = apply_K_diamond(b, kernel, omega0, nu, cfg.with_seed(substream_seed(cfg.seed, "certify")), lattice)
        state.fresh_residual = b.sup_diff(fresh.field)
        state.certified = state.fresh_residual <= state.tol_fp + 4 * state.noise_floor
    return b, state


@dataclass
class ContractionRow:
    t: float
    ratio: float
    bound: float
    satisfied: bool


def contraction_diagnostics(kernel, omega0, nu, b: DriftField, b_tilde: DriftField, cfg: DiamondConfig,
                            C_L: float) -> list[ContractionRow]:
    """Per grid time: sup_x |K<>b - K<>b~| / ||b - b~||_sup against (t + sqrt t) C_L."""
    diff = b.sup_diff(b_tilde)
    if diff == 0:
        raise ValueError("drifts are identical; the Lipschitz ratio is undefined")
    lat = omega0.lattice(cfg.eps)
    a = apply_K_diamond(b, kernel, omega0, nu, cfg, lat).field
    c = apply_K_diamond(b_tilde, kernel, omega0, nu, cfg, lat).field
    rows = []
    for j, t in enumerate(b.times):
        ratio = float(np.max(np.linalg.norm(a.values[j] - c.values[j], axis=-1), initial=0.0)) / diff
        bound = (t + math.sqrt(t)) * C_L
        rows.append(ContractionRow(float(t), ratio, bound, ratio <= bound + 1e-15))
    return rows


@dataclass(frozen=True)
class HoelderFit:
    space_exponent: float
    space_constant: float
    time_exponent: float
    time_constant: float


def _fit(lags, incs):
    incs = np.asarray(incs, dtype=float)
    if np.all(incs == 0):
        return 1.0, 0.0
    keep = incs > 0
    if keep.sum() < 2:
        return 1.0, float(incs.max())
    slope, icpt = np.polyfit(np.log(np.asarray(lags)[keep]), np.log(incs[keep]), 1)
    return float(min(max(slope, 1e-12), 1.0)), float(math.exp(icpt))


def hoelder_modulus(b: DriftField, window: float, lags, t_min: float | None = None) -> HoelderFit:
    """Least-squares Hoelder exponent of b on |x|_inf <= window, t >= t_min.

    ``lags`` are integer node offsets.  Spatial increments are fitted
    against lag * h, temporal ones against sqrt(lag * dt_grid).
    """
    lags = [int(l) for l in lags]
    if len(lags) < 4:
        raise ValueError("need at least 4 lags")
    if window + max(lags) * b.h > b.R + 1e-12:
        raise ValueError("window plus largest lag must stay inside the grid")
    t_min = b.dt_grid if t_min is None else t_min
    k0 = int(math.ceil(t_min / b.dt_grid - 1e-9)) if b.dt_grid > 0 else 0
    vals = b.values[k0:].reshape((-1,) + (b.n,) * b.d + (b.d,))
    ax = b.axis
    inside = np.where(np.abs(ax) <= window + 1e-12)[0]
    lo, hi = inside[0], inside[-1] + 1
    core = tuple([slice(None)] + [slice(lo, hi)] * b.d)
    s_inc = []
    for L in lags:
        m = 0.0
        for a in range(b.d):
            sh = [slice(None)] + [slice(lo, hi)] * b.d
            sh[a + 1] = slice(lo + L, hi + L)
            m = max(m, float(np.max(np.linalg.norm(vals[tuple(sh)] - vals[core], axis=-1), initial=0.0)))
        s_inc.append(m)
    se, sc = _fit([L * b.h for L in lags], s_inc)
    t_lags = [L for L in lags if L < vals.shape[0]]
    if len(t_lags) >= 2:
        t_inc = [float(np.max(np.linalg.norm(vals[L:][(slice(None),) + core[1:]] - vals[:-L][(slice(None),) + core[1:]], axis=-1), initial=0.0))
                 for L in t_lags]
        te, tc = _fit([math.sqrt(L * b.dt_grid) for L in t_lags], t_inc)
    else:
        te, tc = math.nan, math.nan
    return HoelderFit(se, sc, te, tc)
