"""Singular kernels, initial vorticity fields and convolution against laws."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import summation
from .summation import BS2D, BS3D, LOG, POWER

__all__ = [
    "SingularKernel",
    "VorticityField",
    "Lattice",
    "LawSample",
    "GrowthReport",
    "make_builtin_kernel",
    "check_growth",
    "convolve_with_law",
    "drift_from_ensemble",
    "lamb_oseen",
    "gaussian_blob",
    "indicator_ball",
    "point_vortex",
    "zero_field",
]


@dataclass(frozen=True)
class SingularKernel:
    """Matrix-valued kernel K(x) with growth metadata.

    ``kind`` selects the closed form used by the summation loops; ``scale``
    multiplies the whole kernel.  |K| below always means the spectral norm.
    """

    name: str
    d: int
    kind: int
    scale: float
    C0: float
    gamma1: float
    gamma2: float
    power: float = 0.0
    delta: float | None = None

    @property
    def odd(self) -> bool:
        return self.kind in (BS2D, BS3D)

    def with_cutoff(self, delta: float) -> "SingularKernel":
        if not delta > 0:
            raise ValueError("singular cutoff must be positive")
        return replace(self, delta=float(delta))

    def scaled(self, factor: float) -> "SingularKernel":
        """Same kernel times ``factor``, growth metadata left untouched."""
        return replace(self, scale=self.scale * factor)

    def cutoff(self, eps: float | None = None) -> float:
        if self.delta is not None:
            return self.delta
        return 0.0 if eps is None else eps / 4.0

    def __call__(self, x) -> np.ndarray:
        """Kernel matrices at points ``x`` of shape (..., d) -> (..., d, d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected points of dimension {self.d}, got {x.shape[-1]}")
        r2 = np.sum(x * x, axis=-1)
        out = np.zeros(x.shape + (self.d,))
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == BS2D:
                out[..., 0, 0] = -self.scale * x[..., 1] / r2
                out[..., 1, 0] = self.scale * x[..., 0] / r2
            elif self.kind == BS3D:
                g = -self.scale * x / (r2 * np.sqrt(r2))[..., None]
                # K^i_j = eps^{ikj} G^k, the matrix of v -> G x v
                out[..., 0, 1] = -g[..., 2]
                out[..., 0, 2] = g[..., 1]
                out[..., 1, 0] = g[..., 2]
                out[..., 1, 2] = -g[..., 0]
                out[..., 2, 0] = -g[..., 1]
                out[..., 2, 1] = g[..., 0]
            else:
                if self.kind == LOG:
                    s = 0.5 * self.scale * np.log(r2)
                else:
                    s = self.scale * r2 ** (-0.5 * self.power) if self.power else np.full(r2.shape, self.scale)
                for a in range(self.d):
                    out[..., a, a] = s
        return out

    def norm(self, x) -> np.ndarray:
        """Spectral norm |K(x)| in closed form."""
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        with np.errstate(divide="ignore"):
            if self.kind == BS2D:
                return abs(self.scale) / r
            if self.kind == BS3D:
                return abs(self.scale) / r**2
            if self.kind == LOG:
                return abs(self.scale * np.log(r))
            return abs(self.scale) * r ** (-self.power)

    def apply(self, x, v) -> np.ndarray:
        """K(x) v for broadcastable points ``x`` (..., d) and vectors ``v`` (..., d)."""
        return np.einsum("...ij,...j->...i", self(x), np.asarray(v, dtype=float))


def make_builtin_kernel(name: str, d: int | None = None, gamma: float | None = None,
                        normalization: str = "quarter_pi", delta: float | None = None) -> SingularKernel:
    """Built-in kernels: ``biot_savart_3d``, ``biot_savart_2d``, ``riesz``, ``green``.

    ``riesz`` needs ``gamma`` in [0, d); ``green`` is ln|x| in d=2 and
    |x|^(2-d) otherwise.  ``normalization='unnormalized'`` drops the
    1/(4 pi) (3D) or 1/(2 pi) (2D) Biot-Savart prefactor.
    """
    if normalization not in ("quarter_pi", "unnormalized"):
        raise ValueError(f"unknown normalization {normalization!r}")
    norm = normalization == "quarter_pi"
    if name == "biot_savart_3d":
        if d not in (None, 3):
            raise ValueError("biot_savart_3d is defined in d=3 only")
        c = 1.0 / (4.0 * math.pi) if norm else 1.0
        k = SingularKernel(name, 3, BS3D, c, c, 2.0, 2.0, 2.0)
    elif name == "biot_savart_2d":
        if d not in (None, 2):
            raise ValueError("biot_savart_2d is defined in d=2 only")
        c = 1.0 / (2.0 * math.pi) if norm else 1.0
        k = SingularKernel(name, 2, BS2D, c, c, 1.0, 1.0, 1.0)
    elif name == "riesz":
        if d is None or d < 1:
            raise ValueError("riesz kernel needs a dimension d >= 1")
        if gamma is None or not 0.0 <= gamma < d:
            raise ValueError(f"riesz exponent must satisfy 0 <= gamma < d={d}, got {gamma}")
        k = SingularKernel(f"riesz({gamma:g})", d, POWER, 1.0, 1.0, float(gamma), float(gamma), float(gamma))
    elif name == "green":
        if d is None or d < 2:
            raise ValueError("green kernel needs d >= 2")
        if d == 2:
            # sup_{r<1} |ln r| r^(1/2) = 2/e, attained at r = e^-2
            k = SingularKernel("green(2)", 2, LOG, 1.0, 2.0 / math.e, 0.5, 0.0)
        else:
            p = float(d - 2)
            k = SingularKernel(f"green({d})", d, POWER, 1.0, 1.0, p, p, p)
    else:
        raise ValueError(f"unknown kernel {name!r}")
    return k if delta is None else k.with_cutoff(delta)


@dataclass
class GrowthReport:
    max_violation_inner: float
    max_violation_outer: float
    argmax_inner: np.ndarray
    argmax_outer: np.ndarray

    @property
    def violated(self) -> bool:
        return self.max_violation_inner > 1.0 + 1e-12 or self.max_violation_outer > 1.0 + 1e-12


def _random_directions(rng, n, d):
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def check_growth(kernel: SingularKernel, n_samples: int = 10_000, seed: int = 0,
                 r_min: float = 1e-6, r_max: float = 1e6) -> GrowthReport:
    """Largest ratio |K(x)| |x|^gamma / C0 over log-uniform radial samples.

    Inner samples cover (r_min, 1), outer samples [1, r_max].  A ratio above
    one means the declared envelope is violated there.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for lo, hi, g in ((r_min, 1.0, kernel.gamma1), (1.0, r_max, kernel.gamma2)):
        r = np.exp(rng.uniform(np.log(lo), np.log(hi), n_samples))
        if lo == 1.0:
            r[0] = 1.0
        x = r[:, None] * _random_directions(rng, n_samples, kernel.d)
        # spectral norm from the matrices, not the closed form
        mats = kernel(x)
        nrm = np.linalg.norm(mats, ord=2, axis=(-2, -1))
        rr = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = nrm * rr**g / kernel.C0 if kernel.C0 > 0 else np.where(nrm > 0, np.inf, 0.0)
        i = int(np.argmax(ratio))
        out.append((float(ratio[i]), x[i]))
    return GrowthReport(out[0][0], out[1][0], out[0][1], out[1][1])


@dataclass
class LawSample:
    """Empirical (or quadrature) law: points with nonnegative weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("points and weights differ in length")
        if np.any(self.weights < 0):
            raise ValueError("law weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"law weights sum to {self.weights.sum()!r}, expected 1")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("law points must be finite")

    @classmethod
    def uniform(cls, points) -> "LawSample":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(points, np.full(points.shape[0], 1.0 / points.shape[0]))

    @classmethod
    def delta(cls, point) -> "LawSample":
        return cls(np.atleast_2d(point), np.ones(1))


def convolve_with_law(kernel: SingularKernel, law: LawSample, x, delta: float | None = None,
                      diagnostics: dict | None = None) -> np.ndarray:
    """(K * law)(x) = sum_m w_m K(x - u_m) as a d x d matrix.

    Terms with |x - u_m| < delta are dropped; the count goes to
    ``diagnostics['dropped']`` when a dict is supplied.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation point must be finite")
    delta = kernel.cutoff() if delta is None else delta
    diff = x[None, :] - law.points
    r = np.linalg.norm(diff, axis=1)
    keep = (r > 0) & (r >= delta)
    if diagnostics is not None:
        diagnostics["dropped"] = int((~keep).sum())
    mats = kernel(diff[keep])
    return np.einsum("m,mij->ij", law.weights[keep], mats)


def drift_from_ensemble(kernel: SingularKernel, omega0: "VorticityField", lattice: "Lattice",
                        clouds, x, delta: float | None = None) -> np.ndarray:
    """Quadrature drift sum_k eps^d [K * law_k](x) omega0(y_k).

    ``clouds`` holds one LawSample per lattice point, in lattice order.
    """
    if lattice.size == 0:
        raise ValueError("empty lattice")
    if len(clouds) != lattice.size:
        raise ValueError("need one law per lattice point")
    if kernel.d != lattice.d:
        raise ValueError("kernel and lattice dimensions differ")
    reach = np.max(np.abs(lattice.points), initial=0.0)
    if omega0.support_radius is not None and lattice.size > 1 and reach + 1e-12 < omega0.support_radius - lattice.eps:
        raise ValueError("lattice does not cover the support of omega0")
    delta = kernel.cutoff(lattice.eps) if delta is None else delta
    x = np.asarray(x, dtype=float)
    out = np.zeros(kernel.d)
    for k, law in enumerate(clouds):
        if not np.any(lattice.weights[k]):
            continue
        out += convolve_with_law(kernel, law, x, delta) @ lattice.weights[k]
    return out


@dataclass
class Lattice:
    """Lattice quadrature nodes y_k with vector weights eps^d omega0(y_k)."""

    eps: float
    points: np.ndarray
    index: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def total(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    def scaled(self, factor: float) -> "Lattice":
        return Lattice(self.eps, self.points, self.index, self.weights * factor)


def cell_centres(eps: float, radius: float, d: int):
    """Midpoint-rule nodes (k + 1/2) eps covering the box [-radius, radius]^d."""
    n = int(math.ceil(radius / eps - 1e-9))
    ks = np.arange(-n, n)
    grids = np.meshgrid(*([ks] * d), indexing="ij")
    index = np.stack([g.ravel() for g in grids], axis=1)
    return (index + 0.5) * eps, index


@dataclass
class VorticityField:
    """Initial vorticity omega0 with its norms and truncation radius.

    In d=2 the scalar vorticity is carried in the first component of a
    2-vector (second component zero).
    """

    name: str
    d: int
    func: Callable[[np.ndarray], np.ndarray]
    C1: float
    Cinf: float
    support_radius: float
    params: dict = field(default_factory=dict)
    atoms: tuple | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.atoms is not None:
            return np.zeros_like(x)
        vals = np.asarray(self.func(x), dtype=float).reshape(x.shape[0], self.d)
        outside = np.linalg.norm(x, axis=1) > self.support_radius
        vals[outside] = 0.0
        return vals

    def scalar(self, x) -> np.ndarray:
        """Signed scalar part in d=2, Euclidean norm otherwise."""
        v = self(x)
        return v[:, 0] if self.d == 2 else np.linalg.norm(v, axis=1)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def lattice(self, eps: float) -> Lattice:
        """Midpoint lattice over the support box, zero-weight nodes removed."""
        if not eps > 0:
            raise ValueError("lattice mesh must be positive")
        if self.atoms is not None:
            pts, wts = self.atoms
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            return Lattice(eps, pts, np.zeros(pts.shape, dtype=np.int64), np.atleast_2d(np.asarray(wts, dtype=float)))
        pts, index = cell_centres(eps, self.support_radius, self.d)
        w = self(pts) * eps**self.d
        keep = np.any(w != 0.0, axis=1)
        return Lattice(eps, pts[keep], index[keep], w[keep])

    def scaled(self, factor: float) -> "VorticityField":
        f = self.func
        atoms = None if self.atoms is None else (self.atoms[0], np.asarray(self.atoms[1]) * factor)
        return replace(self, func=lambda x: factor * f(x), C1=abs(factor) * self.C1,
                       Cinf=abs(factor) * self.Cinf, atoms=atoms, name=self.name if factor else "zero")

    def check_norms(self, h: float, tol_norm: float = 1e-2) -> dict:
        """Grid estimates of the L1 and sup norms compared with C1, Cinf."""
        pts, _ = cell_centres(h, self.support_radius, self.d)
        mag = np.linalg.norm(self(pts), axis=1)
        l1 = float(mag.sum() * h**self.d)
        sup = float(mag.max(initial=0.0))
        return {"L1": l1, "sup": sup,
                "L1_ok": l1 <= self.C1 * (1 + tol_norm),
                "sup_ok": sup <= self.Cinf * (1 + 1e-12)}


def _embed(d, scalar_vals, axis):
    out = np.zeros((scalar_vals.shape[0], d))
    out[:, axis] = scalar_vals
    return out


def lamb_oseen(circulation: float = 1.0, t0: float = 1.0, nu: float = 0.5,
               support_radius: float = 4.0) -> VorticityField:
    """Lamb-Oseen vorticity Gamma/(4 pi nu t0) exp(-r^2/(4 nu t0)) in d=2."""
    s = 4.0 * nu * t0
    peak = circulation / (math.pi * s)

    def f(x):
        return _embed(2, peak * np.exp(-np.sum(x * x, axis=1) / s), 0)

    return VorticityField("lamb_oseen", 2, f, abs(circulation), abs(peak), support_radius,
                          {"circulation": circulation, "t0": t0, "nu": nu})


def gaussian_blob(amplitude=1.0, sigma: float = 1.0, center=None, d: int = 2,
                  support_radius: float | None = None) -> VorticityField:
    """amplitude * exp(-|x-c|^2 / (2 sigma^2)); a scalar amplitude points along e1 in 2D, e3 in 3D."""
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    amp = np.asarray(amplitude, dtype=float)
    if amp.ndim == 0:
        vec = np.zeros(d)
        vec[0 if d == 2 else d - 1] = float(amp)
    else:
        vec = amp.reshape(d)
    a = float(np.linalg.norm(vec))
    if support_radius is None:
        support_radius = float(np.linalg.norm(c)) + 5.0 * sigma

    def f(x):
        g = np.exp(-np.sum((x - c) ** 2, axis=1) / (2.0 * sigma**2))
        return g[:, None] * vec[None, :]

    return VorticityField("gaussian_blob", d, f, a * (2 * math.pi * sigma**2) ** (d / 2), a,
                          support_radius, {"amplitude": amplitude, "sigma": sigma, "center": c.tolist()})


def indicator_ball(radius: float = 1.0, amplitude: float = 1.0, d: int = 2) -> VorticityField:
    """amplitude on the ball |x| < radius (scalar carried in the first component)."""
    vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius**d

    def f(x):
        inside = np.sum(x * x, axis=1) < radius**2
        return _embed(d, amplitude * inside.astype(float), 0)

    return VorticityField("indicator_ball", d, f, abs(amplitude) * vol, abs(amplitude), radius,
                          {"radius": radius, "amplitude": amplitude})


def point_vortex(circulation: float = 1.0, center=None, d: int = 2) -> VorticityField:
    """Single lattice atom of strength ``circulation`` (unbounded density: Cinf = inf)."""
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    w = np.zeros(d)
    w[0 if d == 2 else d - 1] = circulation
    return VorticityField("point_vortex", d, lambda x: np.zeros_like(x), abs(circulation), math.inf,
                          float(np.linalg.norm(c)) + 1e-12, {"circulation": circulation, "center": c.tolist()},
                          atoms=(c[None, :], w[None, :]))


def zero_field(d: int = 2, support_radius: float = 1.0) -> VorticityField:
    return VorticityField("zero", d, lambda x: np.zeros_like(x), 0.0, 0.0, support_radius)


def lattice_drift(kernel: SingularKernel, lattice: Lattice, targets, delta: float | None = None):
    """Plain lattice convolution sum_k K(x - y_k) eps^d omega0(y_k) at each target."""
    delta = kernel.cutoff(lattice.eps) if delta is None else delta
    out, _ = summation.kernel_sum(kernel, targets, lattice.points, lattice.weights, delta)
    return out
