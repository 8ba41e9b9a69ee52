from __future__ import annotations

import math

import numpy as np
import pytest

from randvortex.kernels import gaussian_blob, lamb_oseen, make_builtin_kernel, point_vortex, zero_field
from randvortex.sde import DriftField
from randvortex.vortex import (
    FieldGrid,
    ParticleBlowUp,
    compare_lamb_oseen,
    divergence_check,
    lamb_oseen_fields,
    lamb_oseen_omega,
    lamb_oseen_u_theta,
    particle_velocity,
    pde_residual,
    radial_profile,
    recover_velocity,
    recover_vorticity,
    run_particle_system,
)

BS2 = make_builtin_kernel("biot_savart_2d")


def radial_second_moment(run, t):
    st = run.state(t)
    w = st.lattice.weights[:, 0]
    r2 = np.sum(st.positions**2, axis=-1).mean(axis=0)
    return float(np.sum(w * r2) / np.sum(w))


def rel_l1(a, b):
    return float(np.sum(np.abs(a - b)) / np.sum(np.abs(b)))


@pytest.mark.parametrize("mode", ["mean_field", "empirical_coupled"])
def test_zero_vorticity_is_brownian(mode):
    N, t = 4000, 0.2
    run = run_particle_system(BS2, zero_field(2, 0.5), 0.5, N, 0.5, 0.01, t, seed=1, mode=mode, observe_times=[t])
    x = run.positions[0, :, 0, :]
    var = x.var(axis=0, ddof=1)
    se = np.sqrt(((x - x.mean(axis=0)) ** 2).var(axis=0, ddof=1) / N)
    assert np.all(np.abs(var - 2 * 0.5 * t) < 4 * se)
    w = recover_vorticity(run.state(t), 2.0, 0.25)
    assert np.all(w.values == 0.0)
    u = recover_velocity(w, BS2)
    assert np.all(u.values == 0.0)
    res = pde_residual(w, w, w, u, 0.5, 0.1)
    assert res.l2 == 0.0


def test_copies_share_noise_across_lattice():
    om = gaussian_blob(1.0, 0.5, d=2, support_radius=1.0)
    run = run_particle_system(BS2, om, 0.5, 10, 0.5, 0.01, 0.1, seed=2, mode="mean_field",
                              drift=DriftField.zeros(3.0, 0.5, 0.1, 0.05, 2), observe_times=[0.1])
    # zero drift: every lattice point of copy n moves by the same Brownian displacement B^n
    disp = run.positions[0] - run.lattice.points[None]
    np.testing.assert_allclose(disp, np.broadcast_to(disp[:, :1], disp.shape), atol=1e-13)


def test_heat_evolution_recovery():
    sigma, t, nu = 0.5, 0.2, 0.5
    om = gaussian_blob(1.0, sigma, d=2)
    run = run_particle_system(BS2, om, 0.25, 1000, nu, 0.01, t, seed=3, mode="mean_field",
                              drift=DriftField.zeros(4.0, 0.5, t, 0.1, 2), observe_times=[t])
    assert run.N * run.lattice.size >= 100_000
    w = recover_vorticity(run.state(t), 4.0, 0.1)
    s2 = sigma**2 + 2 * nu * t
    r2 = np.sum(w.nodes**2, axis=1).reshape(w.n, w.n)
    exact = sigma**2 / s2 * np.exp(-r2 / (2 * s2))
    assert rel_l1(w.scalar, exact) < 0.05


def test_recovery_needs_copies():
    om = gaussian_blob(1.0, 0.5, d=2, support_radius=1.0)
    run = run_particle_system(BS2, om, 0.5, 100, 0.5, 0.01, 0.1, seed=2, mode="mean_field",
                              drift=DriftField.zeros(3.0, 0.5, 0.1, 0.05, 2), observe_times=[0.1])
    with pytest.raises(ValueError):
        recover_vorticity(run.state(0.1), 2.0, 0.25)


def test_lamb_oseen_hand_values():
    assert lamb_oseen_omega(0.0, 0.0) == pytest.approx(1 / (2 * math.pi), rel=1e-15)
    assert abs(lamb_oseen_omega(0.0, 0.0) - 0.159155) < 1e-6
    hand = (1 - math.exp(-0.5)) / (2 * math.pi)
    assert lamb_oseen_u_theta(1.0, 0.0) == pytest.approx(hand, rel=1e-14)
    assert abs(hand - 0.062618) < 1e-5


def test_compare_self_and_scaled():
    w, u = lamb_oseen_fields(4.0, 0.25, 0.0)
    e = compare_lamb_oseen(w, u, 1.0, 1.0, 0.5, 0.0)
    assert e.omega_l1 == 0.0 and e.u_l2 == 0.0 and e.peak_error == 0.0
    e = compare_lamb_oseen(w.scaled(1.05), u.scaled(1.05), 1.0, 1.0, 0.5, 0.0)
    assert abs(e.omega_l1 - 0.05) < 1e-12
    assert abs(e.u_l2 - 0.05) < 1e-12


def test_recover_velocity_lamb_oseen():
    t = 0.3
    w, u_exact = lamb_oseen_fields(6.0, 0.1, t)
    u = recover_velocity(w, BS2)
    e = compare_lamb_oseen(w, u, 1.0, 1.0, 0.5, t)
    assert e.u_l2 < 0.05
    rows = radial_profile(w, u, t)
    assert all(len(r) == 5 for r in rows)


def test_divergence_exact_cases():
    const = FieldGrid.from_function(lambda x: np.tile([1.0, -2.0], (x.shape[0], 1)), 2.0, 0.25, 2)
    assert divergence_check(const).max_div == 0.0
    lin = FieldGrid.from_function(lambda x: np.stack([x[:, 0], -x[:, 1]], 1), 2.0, 0.25, 2)
    assert divergence_check(lin).max_div < 1e-13


def test_divergence_refinement():
    reps = []
    for h in (0.2, 0.1):
        w, _ = lamb_oseen_fields(5.0, h, 0.2)
        reps.append(divergence_check(recover_velocity(w, BS2)))
    for r in reps:
        assert r.max_div < 0.02 * r.max_grad
    assert reps[1].max_div <= 0.5 * reps[0].max_div


def test_residual_of_exact_fields_refines():
    t = 0.2
    l2 = []
    for h, dt in ((0.25, 0.1), (0.125, 0.05)):
        ws = [lamb_oseen_fields(4.0, h, s)[0] for s in (t - dt, t, t + dt)]
        _, u = lamb_oseen_fields(4.0, h, t)
        l2.append(pde_residual(*ws, u, 0.5, dt).l2)
    # second order in (h, dt): halving both divides the residual by about 4
    assert l2[1] < l2[0] / 3


def test_momentum_conserved_in_empirical_mode():
    om = lamb_oseen(support_radius=1.0)
    run = run_particle_system(BS2, om, 0.5, 200, 0.5, 0.01, 0.05, seed=4, mode="empirical_coupled")
    scale = float(np.sum(np.abs(run.lattice.weights[:, 0])))
    assert max(run.momentum) < 1e-13 * scale


def test_single_vortex_early_spread():
    # coincident copies cancel at the start; azimuthal interaction leaves E|X|^2 = 4 nu t
    N, t = 2000, 0.05
    run = run_particle_system(BS2, point_vortex(1.0), 0.05, N, 0.5, 0.005, t, seed=5,
                              mode="empirical_coupled", observe_times=[t])
    r2 = np.sum(run.positions[0, :, 0] ** 2, axis=-1)
    assert abs(r2.mean() - 4 * 0.5 * t) < 4 * r2.std(ddof=1) / math.sqrt(N)


def test_blowup_detected():
    b = DriftField.constant([200.0, 0.0], 500.0, 50.0, 1.0, 0.5)
    with pytest.raises(ParticleBlowUp):
        run_particle_system(BS2, gaussian_blob(1.0, 0.5, d=2, support_radius=0.5), 0.5, 10, 0.5, 0.01, 1.0,
                            seed=6, mode="mean_field", drift=b)


def test_lamb_oseen_moment_evolution(lo_run):
    # azimuthal drift leaves d/dt E|X|^2 = 4 nu
    m0 = float(np.sum(lo_run.lattice.weights[:, 0] * np.sum(lo_run.lattice.points**2, 1))
               / np.sum(lo_run.lattice.weights[:, 0]))
    m = radial_second_moment(lo_run, 0.2)
    assert abs(m - (m0 + 4 * 0.5 * 0.2)) < 0.05 * (m0 + 0.4)


def test_grid_and_particle_velocity_agree(lo_run, bs2):
    st = lo_run.state(0.15)
    w = recover_vorticity(st, 5.0, 0.25)
    u_grid = recover_velocity(w, bs2)
    u_part = particle_velocity(st, bs2, 5.0, 0.25)
    r = np.linalg.norm(u_grid.nodes, axis=1)
    m = (r >= 0.2) & (r <= 3.0)
    diff = np.linalg.norm(u_grid.flat[m] - u_part.flat[m]) / np.linalg.norm(u_part.flat[m])
    assert diff < 0.05
