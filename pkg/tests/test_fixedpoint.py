from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, special

from randvortex.bounds import constants_for
from randvortex.fixedpoint import (
    DiamondConfig,
    apply_K_diamond,
    contraction_diagnostics,
    hoelder_modulus,
    picard_solve,
)
from randvortex.kernels import gaussian_blob, lamb_oseen, lattice_drift, make_builtin_kernel, point_vortex, zero_field
from randvortex.sde import DriftField
from randvortex.vortex import lamb_oseen_u_theta

BS2 = make_builtin_kernel("biot_savart_2d")


def node_index(b: DriftField, x):
    return int(np.argmin(np.linalg.norm(b.nodes - np.asarray(x, dtype=float), axis=1)))


def test_zero_vorticity_gives_zero_field():
    b = DriftField.zeros(2.0, 0.5, 0.2, 0.1, 2)
    res = apply_K_diamond(b, BS2, zero_field(2, 1.0), 0.5, DiamondConfig(0.25, 50, 0.01))
    assert np.all(res.field.values == 0.0)
    sol, state = picard_solve(BS2, zero_field(2, 1.0), 0.5, 0.2, {"R": 2.0, "h": 0.5, "dt_grid": 0.1},
                              DiamondConfig(0.25, 50, 0.01))
    assert state.n == 1 and state.residuals == [0.0] and state.converged
    assert np.all(sol.values == 0.0)


def test_t0_slice_is_plain_convolution():
    om = lamb_oseen(support_radius=2.0)
    b = DriftField.constant([0.3, -0.2], 3.0, 0.5, 0.1, 0.05)
    res = apply_K_diamond(b, BS2, om, 0.5, DiamondConfig(0.5, 30, 0.01, seed=1))
    lat = om.lattice(0.5)
    np.testing.assert_allclose(res.field.values[0], lattice_drift(BS2, lat, b.nodes), rtol=1e-12, atol=1e-15)


def _inverse_distance_oracle(a, sigma):
    # E 1/|x - sigma Z| in d = 2 with |x| = a
    s = a / sigma
    f = lambda r: math.exp(-0.5 * (r - s) ** 2) * special.i0e(r * s)  # noqa: E731
    return integrate.quad(f, 0.0, math.inf, epsabs=1e-13, epsrel=1e-12)[0] / sigma


def test_riesz_single_point_against_quadrature():
    k = make_builtin_kernel("riesz", d=2, gamma=1.0)
    b = DriftField.zeros(2.0, 1.0, 0.5, 0.5, 2)
    res = apply_K_diamond(b, k, point_vortex(1.0), 0.5, DiamondConfig(0.5, 20_000, 0.01, seed=2, n_groups=20))
    oracle = _inverse_distance_oracle(2.0, math.sqrt(0.5))
    i = node_index(b, [2.0, 0.0])
    est, se = res.field.values[-1, i, 0], res.std_error[-1, i, 0]
    assert abs(est - oracle) < 3 * se


def test_dual_estimators_agree_on_ou_drift():
    om = gaussian_blob(1.0, 0.3, d=2, support_radius=0.6)
    b = DriftField.from_function(lambda x, t: -x, 3.0, 0.5, 0.5, 0.25, 2)
    out = {}
    for est in ("direct_simulation", "cameron_martin_weighted"):
        cfg = DiamondConfig(0.3, 4000, 0.01, seed=3 if est == "direct_simulation" else 4, estimator=est, n_groups=20)
        out[est] = apply_K_diamond(b, BS2, om, 0.5, cfg)
    a, c = out["direct_simulation"], out["cameron_martin_weighted"]
    for x in ([2.0, 0.0], [0.0, 2.0], [-2.0, -2.0]):
        i = node_index(b, x)
        se = np.hypot(a.std_error[-1, i], c.std_error[-1, i])
        assert np.all(np.abs(a.field.values[-1, i] - c.field.values[-1, i]) < 4 * se)


def test_linear_in_omega0():
    om = lamb_oseen(support_radius=2.0)
    b = DriftField.zeros(3.0, 0.5, 0.1, 0.05, 2)
    cfg = DiamondConfig(0.5, 40, 0.01, seed=5)
    one = apply_K_diamond(b, BS2, om, 0.5, cfg).field.values
    two = apply_K_diamond(b, BS2, om.scaled(-2.5), 0.5, cfg).field.values
    np.testing.assert_allclose(two, -2.5 * one, rtol=1e-12, atol=1e-15)


def test_output_bounded_by_C_K():
    om = lamb_oseen()
    sc = constants_for(BS2, om)
    b = DriftField.constant([0.5 * sc.C_K, 0.0], 4.0, 0.25, 0.1, 0.05)
    res = apply_K_diamond(b, BS2, om, 0.5, DiamondConfig(0.25, 100, 0.01, seed=6))
    rel_noise = res.noise_sup / max(res.field.sup_norm, 1e-300)
    assert res.field.sup_norm <= sc.C_K * (1 + 3 * rel_noise)


def test_contraction_diagnostics():
    om = lamb_oseen(support_radius=3.0)
    sc = constants_for(BS2, om)
    b = DriftField.zeros(4.0, 0.5, 0.02, 0.005, 2)
    bt = DriftField.constant([0.1, 0.0], 4.0, 0.5, 0.02, 0.005)
    rows = contraction_diagnostics(BS2, om, 0.5, b, bt, DiamondConfig(0.5, 100, 0.005, seed=7), sc.C_L)
    assert rows[0].t == 0.0 and rows[0].ratio == 0.0
    assert all(r.satisfied and np.isfinite(r.ratio) for r in rows)
    with pytest.raises(ValueError):
        contraction_diagnostics(BS2, om, 0.5, b, b, DiamondConfig(0.5, 10, 0.005), sc.C_L)


def test_hoelder_flat_and_smooth():
    flat = DriftField.constant([1.0, 2.0], 2.0, 0.25, 0.4, 0.1)
    fit = hoelder_modulus(flat, 1.0, [1, 2, 3, 4])
    assert fit.space_exponent == 1.0 and fit.space_constant == 0.0

    def lo_velocity(x, t):
        r = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(r > 0, lamb_oseen_u_theta(r, t) / r, 0.0)
        return np.stack([-x[:, 1] * f, x[:, 0] * f], axis=1)

    smooth = DriftField.from_function(lo_velocity, 4.0, 0.125, 0.4, 0.1, 2)
    fit = hoelder_modulus(smooth, 2.0, [1, 2, 4, 8])
    assert fit.space_exponent >= 0.9
    assert 0 < fit.time_exponent <= 1 or math.isnan(fit.time_exponent)
    with pytest.raises(ValueError):
        hoelder_modulus(smooth, 2.0, [1, 2, 4])


def test_nonconvergence_is_reported():
    from randvortex.fixedpoint import PicardError

    om = lamb_oseen(support_radius=2.0)
    with pytest.raises(PicardError) as err:
        picard_solve(BS2, om, 0.5, 0.2, {"R": 3.0, "h": 0.5, "dt_grid": 0.1},
                     DiamondConfig(0.5, 20, 0.01, seed=8), tol_fp=0.0, max_iter=2)
    assert err.value.kind == "nonconvergence"
    assert err.value.state.n == 2
