"""Structure constants, heat-kernel envelopes and Monte Carlo audits of the
singular-integral bounds.

All formulas here are in unit-diffusion units (dX = b dt + dB, nu = 1/2).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "StructureConstants",
    "BoundReport",
    "sphere_surface",
    "gaussian_moment",
    "kappa1",
    "structure_constants",
    "lipschitz_constant",
    "build_constants",
    "sharp_density_bound",
    "sharp_bound_ratio",
    "constant_drift_peak",
    "calibrate_kappa",
    "aronson_envelope",
    "aronson_gaussian_worst",
    "calibrate_aronson_M",
    "verify_I_bound",
    "verify_J_bound",
    "gaussian_ball_IJ",
]


def sphere_surface(d: int) -> float:
    """Surface measure of the unit sphere S^{d-1}: 2 pi^{d/2} / Gamma(d/2)."""
    if d <= 0:
        raise ValueError("dimension must be positive")
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def q_range(d: int) -> tuple[float, float]:
    return 1.0, (math.inf if d == 1 else d / (d - 1))


def default_q(d: int) -> float:
    lo, hi = q_range(d)
    return 2.0 if math.isinf(hi) else 0.5 * (lo + hi)


def _check_q(d, q):
    lo, hi = q_range(d)
    if not lo < q < hi:
        raise ValueError(f"q must lie in ({lo}, {hi}) for d={d}, got {q}")


def gaussian_moment(d: int, q: float, method: str = "closed") -> float:
    """Integral of (1 + |y|) (2 pi)^{-d/2} exp(-|y|^2 / (2q)) over R^d."""
    if method == "closed":
        return q ** (d / 2) * (1.0 + math.sqrt(2 * q) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2)))
    if method == "quadrature":
        def radial(r):
            return (1.0 + r) * r ** (d - 1) * math.exp(-r * r / (2 * q))

        val, _ = integrate.quad(radial, 0.0, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
        return sphere_surface(d) * (2 * math.pi) ** (-d / 2) * val
    raise ValueError(f"unknown method {method!r}")


def kappa1(d: int, q: float, kappa: float, method: str = "closed") -> float:
    """max{ |S^{d-1}|, kappa * gaussian_moment(d, q) }."""
    _check_q(d, q)
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return max(sphere_surface(d), kappa * gaussian_moment(d, q, method))


@dataclass(frozen=True)
class KConstants:
    C_K: float
    T_K: float

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.T_K)


def structure_constants(C0: float, C1: float, Cinf: float, gamma1: float, d: int,
                        q: float | None = None, kappa: float = 1.0) -> KConstants:
    """C_K = C0 (kappa1 Cinf (1 + e^{1/(2(q-1))}) / (d - gamma1) + C1), T_K = 1/C_K^2."""
    if not 0.0 <= gamma1 < d:
        raise ValueError(f"gamma1 must lie in [0, d={d}), got {gamma1}")
    if min(C0, C1, Cinf) < 0:
        raise ValueError("C0, C1, Cinf must be nonnegative")
    q = default_q(d) if q is None else q
    k1 = kappa1(d, q, kappa)
    ck = C0 * (k1 * Cinf / (d - gamma1) * (1.0 + math.exp(1.0 / (2.0 * (q - 1.0)))) + C1)
    if ck == 0:
        return KConstants(0.0, math.inf)
    return KConstants(ck, 1.0 / ck**2)


def default_alpha(d: int, gamma1: float) -> float:
    return 0.5 * (1.0 + d / gamma1) if gamma1 > 0 else 2.0


@dataclass(frozen=True)
class StructureConstants:
    d: int
    q: float
    kappa: float
    kappa1: float
    C0: float
    C1: float
    Cinf: float
    gamma1: float
    C_K: float
    T_K: float
    alpha: float
    beta: float
    C_beta: float
    C_L: float = math.nan
    T_L_derived: float = math.nan
    T_L_paper_literal: float = math.nan

    KEYS = ("d", "q", "kappa", "kappa1", "C0", "C1", "Cinf", "gamma1", "C_K", "T_K",
            "alpha", "beta", "C_beta", "C_L", "T_L_derived", "T_L_paper_literal")

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()}

    @property
    def T_K_unbounded(self) -> bool:
        return math.isinf(self.T_K)


@dataclass(frozen=True)
class LipschitzConstants:
    C_L: float
    T_L_derived: float
    T_L_paper_literal: float


def contraction_horizon(C_L: float) -> float:
    """Largest t with (t + sqrt t) C_L <= 1/2."""
    if C_L <= 0:
        return math.inf
    # sqrt t solves s^2 + s - 1/(2 C_L) = 0; rationalised for large C_L
    s = (1.0 / C_L) / (1.0 + math.sqrt(1.0 + 2.0 / C_L))
    t = s * s
    while (t + math.sqrt(t)) * C_L > 0.5:
        t = math.nextafter(t, 0.0)
    while True:
        up = math.nextafter(t, math.inf)
        if (up + math.sqrt(up)) * C_L > 0.5:
            return t
        t = up


def lipschitz_constant(sc: StructureConstants) -> LipschitzConstants:
    """C_L as the sum of the three contributions of the Lipschitz estimate.

    T_L_derived = min(T_K, largest t with (t + sqrt t) C_L <= 1/2);
    T_L_paper_literal = min(C_L / 4, 1) is reported for reference only.
    """
    a, d, g1 = sc.alpha, sc.d, sc.gamma1
    if not a > 1:
        raise ValueError("alpha must exceed 1")
    if not a * g1 < d:
        raise ValueError(f"alpha*gamma1 = {a * g1} must be < d = {d}")
    if sc.C_K == 0:
        return LipschitzConstants(0.0, sc.T_K, 0.0)
    eq = math.exp(1.0 / (2.0 * (sc.q - 1.0)))
    term1 = sc.C0 * sc.C1 * math.sqrt(math.exp((a * a - 1.0) / 2.0)) * (sc.C_K + 1.0)
    term2 = sc.C0 * sc.Cinf * sc.C_K * sc.kappa1 * (1.0 + eq) / (d - g1)
    inner = sc.kappa1 * (1.0 + a * math.exp(a * a / (2.0 * (sc.q - 1.0)))) / (d - a * g1)
    term3 = sc.C0 * (sc.C1 * sc.C_beta) ** (1.0 / sc.beta) * math.exp((a * a - 1.0) / (2.0 * a)) * inner ** (1.0 / a)
    c_l = term1 + term2 + term3
    return LipschitzConstants(c_l, min(sc.T_K, contraction_horizon(c_l)), min(c_l / 4.0, 1.0))


def build_constants(C0: float, C1: float, Cinf: float, gamma1: float, d: int,
                    q: float | None = None, kappa: float = 1.0, alpha: float | None = None,
                    C_beta: float | None = None) -> StructureConstants:
    """Full constant block with defaults for q, alpha, beta and C_beta."""
    q = default_q(d) if q is None else float(q)
    _check_q(d, q)
    alpha = default_alpha(d, gamma1) if alpha is None else float(alpha)
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if not alpha * gamma1 < d:
        raise ValueError(f"alpha*gamma1 = {alpha * gamma1} must be < d = {d}")
    beta = alpha / (alpha - 1.0)
    C_beta = (2.0 * beta) ** beta if C_beta is None else float(C_beta)
    k = structure_constants(C0, C1, Cinf, gamma1, d, q, kappa)
    sc = StructureConstants(d, q, kappa, kappa1(d, q, kappa), C0, C1, Cinf, gamma1,
                            k.C_K, k.T_K, alpha, beta, C_beta)
    lc = lipschitz_constant(sc)
    return StructureConstants(**{**sc.as_dict(), "C_L": lc.C_L, "T_L_derived": lc.T_L_derived,
                                 "T_L_paper_literal": lc.T_L_paper_literal})


def constants_for(kernel, omega0, q=None, kappa=1.0, alpha=None, C_beta=None) -> StructureConstants:
    """Constants for a kernel / initial-vorticity pair."""
    return build_constants(kernel.C0, omega0.C1, omega0.Cinf, kernel.gamma1, kernel.d,
                           q=q, kappa=kappa, alpha=alpha, C_beta=C_beta)


# ---------------------------------------------------------------------------
# heat-kernel envelopes


def gaussian_kernel(t, r, d):
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    return (2 * np.pi * t) ** (-d / 2) * np.exp(-(r * r) / (2 * t))


def sharp_density_bound(A, t, r, d: int, q: float | None = None, kappa: float = 1.0):
    """Upper bound on a transition density with drift bounded by A at distance r after time t."""
    q = default_q(d) if q is None else q
    A = np.asarray(A, dtype=float)
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    with np.errstate(over="ignore"):
        corr = kappa * A * (np.sqrt(t) + r) * np.exp((q - 1) * r * r / (2 * q * t) + A * A * t / (2 * (q - 1)))
    corr = np.where(A == 0, 0.0, corr)
    return gaussian_kernel(t, r, d) * (1.0 + corr)


def constant_drift_peak(A, t, r, d):
    """Largest constant-drift density over points at distance r: drift aligned with the offset."""
    A = np.asarray(A, dtype=float)
    return (2 * np.pi * t) ** (-d / 2) * np.exp(-((r - A * t) ** 2) / (2 * t))


def sharp_bound_ratio(A, t, r, d: int, q: float | None = None, kappa: float = 1.0) -> np.ndarray:
    """constant_drift_peak / sharp_density_bound, evaluated in log space so far tails stay finite."""
    q = default_q(d) if q is None else q
    A = np.asarray(A, dtype=float)
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    with np.errstate(over="ignore"):
        corr = kappa * A * (np.sqrt(t) + r) * np.exp((q - 1) * r * r / (2 * q * t) + A * A * t / (2 * (q - 1)))
    corr = np.where(A == 0, 0.0, corr)
    return np.exp(r * A - A * A * t / 2 - np.log1p(corr))


def calibrate_kappa(d: int, A_values, t_grid, r_grid, q: float | None = None) -> float:
    """Smallest kappa for which the sharp bound dominates every constant-drift density on the grid."""
    q = default_q(d) if q is None else q
    A = np.asarray(A_values, dtype=float)[:, None, None]
    t = np.asarray(t_grid, dtype=float)[None, :, None]
    r = np.asarray(r_grid, dtype=float)[None, None, :]
    # p/gauss = exp(rA - A^2 t / 2); bound/gauss = 1 + kappa * den
    with np.errstate(over="ignore"):
        excess = np.expm1(r * A - A * A * t / 2)
        den = A * (np.sqrt(t) + r) * np.exp((q - 1) * r * r / (2 * q * t) + A * A * t / (2 * (q - 1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where((den > 0) & (excess > 0), excess / den, 0.0)
    k = float(np.max(need, initial=0.0))
    return math.nextafter(k, math.inf) if k > 0 else 0.0


def aronson_envelope(M: float, t, r, d: int):
    """(lower, upper) = (exp(-M r^2/t) / (M t^{d/2}), M exp(-r^2/(M t)) / t^{d/2})."""
    if M < 1:
        raise ValueError("Aronson constant M must be >= 1")
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    lower = np.exp(-M * r * r / t) / (M * t ** (d / 2))
    upper = M * np.exp(-r * r / (M * t)) / t ** (d / 2)
    return lower, upper


def aronson_gaussian_worst(M: float, t, r, d: int) -> float:
    """max(lower / p, p / upper) for the zero-drift Gaussian p, in log space."""
    if M < 1:
        raise ValueError("Aronson constant M must be >= 1")
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    z = r * r / t
    log_c = 0.5 * d * math.log(2 * math.pi)
    log_lo = -M * z - math.log(M) + log_c + 0.5 * z
    log_hi = -math.log(M) - log_c - 0.5 * z + z / M
    return float(np.exp(max(np.max(log_lo), np.max(log_hi))))


def calibrate_aronson_M(density, t_grid, r_grid, d: int, slack: float = 0.0,
                        M_max: float = 1e6) -> float:
    """Smallest M >= 1 (to bisection precision, rounded up) with
    (1 + slack) lower <= density(t, r) <= upper / (1 + slack) on the grid."""
    t = np.asarray(t_grid, dtype=float)[:, None]
    r = np.asarray(r_grid, dtype=float)[None, :]
    p = np.asarray(density(t, r), dtype=float)

    def ok(M):
        lo, hi = aronson_envelope(M, t, r, d)
        return bool(np.all(lo * (1 + slack) <= p) and np.all(p * (1 + slack) <= hi))

    if ok(1.0):
        return 1.0
    lo, hi = 1.0, 2.0
    while not ok(hi):
        lo, hi = hi, hi * 2
        if hi > M_max:
            raise ValueError("no admissible Aronson constant below M_max")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Monte Carlo audits of the I and J integrals


@dataclass
class BoundReport:
    name: str
    lhs_estimate: float
    lhs_std_error: float
    rhs_bound: float
    satisfied: bool
    margin: float
    oracle: float | None = None

    @classmethod
    def make(cls, name, lhs, se, rhs, oracle=None) -> "BoundReport":
        return cls(name, float(lhs), float(se), float(rhs), bool(lhs - 3.0 * se <= rhs), float(rhs - lhs), oracle)


def _angular_mean_exp(kappa_arg, d):
    """Mean of exp(k <theta, e> - k) over the unit sphere, stably for large k."""
    nu = d / 2.0 - 1.0
    k = np.asarray(kappa_arg, dtype=float)
    small = k < 1e-8
    ks = np.where(small, 1.0, k)
    bessel = special.i0e(ks) if d == 2 else special.ive(nu, ks)
    val = math.gamma(d / 2.0) * (2.0 / ks) ** nu * bessel
    return np.where(small, np.exp(-k), val)


def _gl_panels(a, b, n_panels, order=8):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n_panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * (edges[1:] - edges[:-1])[:, None]
    return (mid + half * x).ravel(), (half * w).ravel()


def smoothed_radial_integral(c_norm, var, d, gamma, rho, inner=True, n_panels=64):
    """E over w ~ N(0, var I) of g(c - w), g(z) = |z|^-gamma on |z| < rho (inner) or |z| >= rho.

    Polar coordinates reduce the Gaussian over each sphere to a Bessel
    average; the remaining radial integral uses composite Gauss-Legendre
    after substituting s = rho u^{1/(d-gamma)} on the inner ball.
    """
    c = np.asarray(c_norm, dtype=float)[:, None]
    surf = sphere_surface(d)
    sd = math.sqrt(var)
    if inner:
        u, wu = _gl_panels(0.0, 1.0, n_panels)
        s = rho * u ** (1.0 / (d - gamma))
        jac = rho ** (d - gamma) / (d - gamma)
        radial = np.broadcast_to(wu * jac, s.shape)
    else:
        top = max(rho, float(c.max(initial=0.0)) + 12.0 * sd) + 12.0 * sd
        s, ws = _gl_panels(rho, top, max(n_panels, int(2 * (top - rho) / sd) + 1))
        radial = ws * s ** (d - 1 - gamma)
    s = s[None, :]
    expo = (c - s) ** 2 / (2 * var)
    # ive(k) <= 1, so nodes with exp(-expo) below 1e-30 contribute nothing
    live = expo < 69.0
    cc, ss = np.broadcast_arrays(c, s)
    term = np.zeros(expo.shape)
    term[live] = np.exp(-expo[live]) * _angular_mean_exp(cc[live] * ss[live] / var, d)
    dens_c = (2 * math.pi * var) ** (-d / 2)
    return surf * dens_c * np.sum(radial[None, :] * term, axis=1)


def _ij_estimate(f, x, t, rho, gamma, drift, n_samples, seed, dt, last_fraction, inner):
    from .sde import simulate_paths

    if n_samples < 100:
        raise ValueError("need at least 100 Monte Carlo samples")
    d = f.d
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    R = f.support_radius
    ys = rng.uniform(-R, R, size=(n_samples, d))
    wts = np.linalg.norm(f(ys), axis=1)
    if not np.any(wts > 0):
        return 0.0, 0.0
    # without drift the whole Gaussian step is integrated exactly
    last = t if drift is None else max(min(t, dt), last_fraction * t)
    t_pre = t - last
    if t_pre <= 0:
        pre = ys
    else:
        n_pre = max(1, int(round(t_pre / dt)))
        step = t_pre / n_pre
        batch = simulate_paths(drift, ys, 0.5, step, [n_pre * step], seed, 1)
        pre = batch.positions[-1]
    if drift is not None:
        pre = pre + drift.evaluate(pre, t_pre) * last
    c = np.linalg.norm(x[None, :] - pre, axis=1)
    vals = smoothed_radial_integral(c, last, d, gamma, rho, inner)
    # self-normalised over the sampled |f| mass, scaled by the declared L1 norm
    wsum = wts.sum()
    est = float(np.sum(wts * vals) / wsum)
    se = float(np.sqrt(np.sum((wts * (vals - est)) ** 2)) / wsum)
    return f.C1 * est, f.C1 * se


def verify_I_bound(f, x, t, rho, gamma, drift=None, sc: StructureConstants | None = None,
                   n_samples: int = 4000, seed: int = 0, dt: float = 0.01,
                   last_fraction: float = 0.25, q: float | None = None, kappa1_value: float | None = None) -> BoundReport:
    """Monte Carlo estimate of the near-field integral I vs its bound.

    I = int int_{|z|<rho} |z|^-gamma |f(y)| p_b(0, y, t, x - z) dz dy with
    endpoints from unit-diffusion paths; the final step is integrated
    exactly, which keeps the estimator variance finite.
    """
    if not 0 <= gamma < f.d:
        raise ValueError("gamma must lie in [0, d)")
    d = f.d
    if sc is not None:
        k1, q = sc.kappa1, sc.q
    else:
        q = default_q(d) if q is None else q
        k1 = kappa1(d, q, 1.0) if kappa1_value is None else kappa1_value
    A = 0.0 if drift is None else drift.sup_norm
    rhs = rho ** (d - gamma) / (d - gamma) * k1 * f.Cinf * (1.0 + A * math.sqrt(t) * math.exp(A * A * t / (2 * (q - 1))))
    if f.Cinf == 0:
        return BoundReport.make("I", 0.0, 0.0, rhs)
    lhs, se = _ij_estimate(f, x, t, rho, gamma, drift, n_samples, seed, dt, last_fraction, True)
    return BoundReport.make("I", lhs, se, rhs)


def verify_J_bound(f, x, t, rho, gamma, drift=None, n_samples: int = 4000, seed: int = 0,
                   dt: float = 0.01, last_fraction: float = 0.25) -> BoundReport:
    """Monte Carlo estimate of the far-field integral J vs ||f||_1 / rho^gamma."""
    if not rho > 0 or gamma < 0:
        raise ValueError("need rho > 0 and gamma >= 0")
    rhs = f.C1 / rho**gamma
    if f.C1 == 0:
        return BoundReport.make("J", 0.0, 0.0, rhs)
    lhs, se = _ij_estimate(f, x, t, rho, gamma, drift, n_samples, seed, dt, last_fraction, False)
    if gamma == 0:
        lhs = min(lhs, rhs)  # total mass: only rounding can push past ||f||_1
    return BoundReport.make("J", lhs, se, rhs)


def gaussian_ball_IJ(radius, amplitude, x, t, rho, gamma, d=2, inner=True):
    """Quadrature value of I (inner) or J for f = amplitude * 1{|y| < radius} with zero drift.

    The y-integral is the noncentral chi-square probability that
    w + sqrt(t) xi lands in the ball; the z-integral is done in polar form.
    """
    if d != 2:
        raise ValueError("quadrature oracle implemented for d = 2")
    x = np.asarray(x, dtype=float)

    def mass(w1, w2):
        return special.chndtr(radius**2 / t, 2.0, (w1 * w1 + w2 * w2) / t)

    def integrand(phi, s):
        return s ** (1 - gamma) * mass(x[0] - s * math.cos(phi), x[1] - s * math.sin(phi))

    if inner:
        lo, hi = 0.0, rho
    else:
        lo, hi = rho, np.linalg.norm(x) + radius + 12 * math.sqrt(t)
        if hi <= lo:
            return 0.0
    val, _ = integrate.dblquad(integrand, lo, hi, 0.0, 2 * math.pi, epsabs=1e-10, epsrel=1e-8)
    return abs(amplitude) * val
