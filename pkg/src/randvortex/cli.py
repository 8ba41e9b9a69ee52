"""Command-line front end: constants, solve-drift, simulate, verify-bounds, compare."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (
    BoundReport,
    StructureConstants,
    aronson_gaussian_worst,
    build_constants,
    calibrate_aronson_M,
    calibrate_kappa,
    default_q,
    gaussian_ball_IJ,
    gaussian_kernel,
    kappa1,
    sharp_bound_ratio,
    verify_I_bound,
    verify_J_bound,
)
from .config import AUTO, ConfigError, RunConfig, load_config
from .fixedpoint import DiamondConfig, PicardError, picard_solve
from .io import Manifest, fmt, read_drift, read_field, write_csv, write_drift, write_field, write_ndjson
from .kernels import (
    SingularKernel,
    VorticityField,
    gaussian_blob,
    indicator_ball,
    lamb_oseen,
    make_builtin_kernel,
    point_vortex,
    zero_field,
)
from .rng import substream_seed
from .vortex import (
    ParticleBlowUp,
    compare_lamb_oseen,
    divergence_check,
    half_sample_residual,
    pde_residual,
    radial_profile,
    recover_velocity,
    recover_vorticity,
    run_particle_system,
)

log = logging.getLogger("randvortex")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_NAN = 4
EXIT_BLOWUP = 5
EXIT_BOUND = 6


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# building blocks from a config


def build_kernel(cfg: RunConfig) -> SingularKernel:
    k = make_builtin_kernel(cfg["kernel.name"], d=cfg["run.d"], gamma=cfg["kernel.gamma"],
                            normalization=cfg["kernel.normalization"], delta=cfg["kernel.delta"])
    s = cfg["kernel.scale"]
    if s != 1.0:
        # a scaled kernel keeps an exact envelope by scaling C0 too
        k = replace(k, scale=k.scale * s, C0=k.C0 * abs(s))
    return k


def build_omega(cfg: RunConfig) -> VorticityField:
    d = cfg["run.d"]
    name = cfg["omega0.name"]
    R = cfg["omega0.support_radius"]
    if name == "lamb_oseen":
        return lamb_oseen(cfg["omega0.circulation"], cfg["omega0.t0"], cfg["run.nu"], R)
    if name == "gaussian_blob":
        return gaussian_blob(cfg["omega0.amplitude"], cfg["omega0.sigma"], cfg["omega0.center"], d, R)
    if name == "indicator_ball":
        return indicator_ball(cfg["omega0.radius"], cfg["omega0.amplitude"], d)
    if name == "point_vortex":
        return point_vortex(cfg["omega0.circulation"], cfg["omega0.center"], d)
    return zero_field(d, R)


def build_structure(cfg: RunConfig, kernel: SingularKernel, omega: VorticityField) -> StructureConstants:
    def pick(key, value):
        v = cfg[f"constants.{key}"]
        return value if v is None else v

    try:
        return build_constants(pick("C0", kernel.C0), pick("C1", omega.C1), pick("Cinf", omega.Cinf),
                               pick("gamma1", kernel.gamma1), cfg["run.d"], q=cfg["constants.q"],
                               kappa=cfg["constants.kappa"], alpha=cfg["constants.alpha"],
                               C_beta=cfg["constants.C_beta"])
    except ValueError as exc:
        raise CLIError(f"constants: {exc}", EXIT_CONFIG) from exc


def _multiple(a: float, b: float) -> bool:
    m = a / b
    return abs(m - round(m)) <= 1e-9 * max(1.0, m)


def resolve_times(cfg: RunConfig, sc: StructureConstants) -> tuple[float, float, float]:
    """(T, dt_grid, dt) with the auto rules T = min(T_L_derived, T_cap), dt_grid = T/slices, dt = dt_grid/steps."""
    T = cfg["grids.T"]
    if T == AUTO:
        tl = sc.T_L_derived
        if not tl > 0 or math.isnan(tl):
            raise CLIError("grids.T: auto needs a positive T_L; set T explicitly", EXIT_CONFIG)
        T = min(tl, cfg["grids.T_cap"])
    dtg = cfg["grids.dt_grid"]
    dtg = T / cfg["grids.time_slices"] if dtg == AUTO else dtg
    dt = cfg["solver.dt"]
    dt = dtg / cfg["solver.steps_per_slice"] if dt == AUTO else dt
    if not _multiple(T, dtg):
        raise CLIError(f"grids.dt_grid: T={T} is not a multiple of dt_grid={dtg}", EXIT_CONFIG)
    if not _multiple(dtg, dt):
        raise CLIError(f"solver.dt: dt_grid={dtg} is not a multiple of dt={dt}", EXIT_CONFIG)
    return T, dtg, dt


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# workflows


def cmd_constants(cfg: RunConfig, args, out: Path, man: Manifest) -> int:
    k = build_kernel(cfg)
    om = build_omega(cfg)
    sc = build_structure(cfg, k, om)
    rec = sc.as_dict()
    lines = [f"{key}={fmt(rec[key])}" for key in StructureConstants.KEYS]
    lines.append(f"T_K_unbounded={fmt(sc.T_K_unbounded)}")
    print("\n".join(lines))
    rec = {**rec, "T_K_unbounded": sc.T_K_unbounded}
    man.add(write_ndjson(out / "constants.ndjson", [rec]))
    return EXIT_OK


def cmd_solve_drift(cfg: RunConfig, args, out: Path, man: Manifest) -> int:
    k = build_kernel(cfg)
    om = build_omega(cfg)
    sc = build_structure(cfg, k, om)
    T, dtg, dt = resolve_times(cfg, sc)
    if T > sc.T_K and not args.allow_beyond_TK:
        raise CLIError(f"T={T:.6g} exceeds T_K={sc.T_K:.6g}; pass --allow-beyond-TK to run anyway", EXIT_CONFIG)
    seed = substream_seed(cfg["run.seed"], "drift-solve")
    dcfg = DiamondConfig(cfg["solver.eps"], cfg["solver.M"], dt, seed, cfg["solver.estimator"],
                         cfg["solver.n_groups"], cfg["kernel.delta"])
    tol = cfg["tolerances.tol_fp"]
    grid = {"R": cfg["grids.R"], "h": cfg["grids.h"], "dt_grid": dtg}
    summary = {"T": T, "dt_grid": dtg, "dt": dt, "T_K": sc.T_K, "T_K_unbounded": sc.T_K_unbounded, "T_L_derived": sc.T_L_derived}
    try:
        b, state = picard_solve(k, om, cfg["run.nu"], T, grid, dcfg, None if tol == AUTO else tol,
                                cfg["tolerances.max_iter"], T_L=sc.T_L_derived)
    except PicardError as exc:
        st = exc.state
        man.add(write_csv(out / "picard.csv", st.csv_rows()))
        summary.update(converged=False, failure=exc.kind, message=str(exc), iterations=st.n,
                       noise_floor=st.noise_floor, tol_fp=st.tol_fp)
        man.add(write_ndjson(out / "solve_summary.ndjson", [summary]))
        raise CLIError(str(exc), EXIT_NAN if exc.kind == "nan" else EXIT_NONCONVERGED) from exc
    man.add(write_drift(out / "drift.ndjson", b))
    man.add(write_csv(out / "picard.csv", state.csv_rows()))
    summary.update(converged=state.converged, iterations=state.n, noise_floor=state.noise_floor,
                   tol_fp=state.tol_fp, final_residual=state.residuals[-1],
                   fresh_residual=state.fresh_residual, certified=state.certified,
                   in_contraction_regime=state.in_contraction_regime,
                   max_ratio=float(np.max(state.recorded_ratios(), initial=0.0)),
                   sup_norm=b.sup_norm, C_K=sc.C_K, warnings=state.warnings)
    man.add(write_ndjson(out / "solve_summary.ndjson", [summary]))
    print(f"converged in {state.n} iterations; residual {fmt(state.residuals[-1])}; "
          f"noise floor {fmt(state.noise_floor)}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args, out: Path, man: Manifest) -> int:
    k = build_kernel(cfg)
    om = build_omega(cfg)
    nu = cfg["run.nu"]
    mode = "empirical_coupled" if args.mode == "empirical" else "mean_field"
    drift = None
    drift_path = Path(args.drift) if args.drift else out / "drift.ndjson"
    if drift_path.exists():
        drift = read_drift(drift_path)
        if drift.d != cfg["run.d"]:
            raise CLIError("drift file dimension does not match run.d", EXIT_CONFIG)
    elif mode == "mean_field" and not om.is_zero:
        raise CLIError(f"mean-field simulation needs a drift file ({drift_path} not found)", EXIT_CONFIG)
    if drift is not None:
        T = drift.T
        dt = drift.dt_grid / cfg["solver.steps_per_slice"] if cfg["solver.dt"] == AUTO else cfg["solver.dt"]
    else:
        T, _, dt = resolve_times(cfg, build_structure(cfg, k, om))
    dsnap = cfg["simulate.dt_snap"]
    dsnap = T / 4 if dsnap == AUTO else dsnap
    t_mid = cfg["simulate.t"]
    t_mid = T - dsnap if t_mid == AUTO else t_mid
    times = [t_mid - dsnap, t_mid, t_mid + dsnap]
    if times[0] < -1e-12 or times[2] > T * (1 + 1e-9):
        raise CLIError(f"snapshot times {times} fall outside [0, {T}]", EXIT_CONFIG)
    for s in times:
        if not _multiple(s, dt) and s > 0:
            raise CLIError(f"snapshot time {s} is not a multiple of dt={dt}", EXIT_CONFIG)
    N = cfg["solver.N"]
    if N < 1000 and not om.is_zero:
        raise CLIError("solver.N: vorticity recovery needs N >= 1000 copies", EXIT_CONFIG)
    seed = substream_seed(cfg["run.seed"], "simulate")
    if mode == "empirical_coupled":
        n_part = N * om.lattice(cfg["solver.eps"]).size
        if n_part > 20000:
            log.warning("empirical mode sums all %d^2 particle pairs per step; expect a long run", n_part)
    try:
        run = run_particle_system(k, om, cfg["solver.eps"], N, nu, dt, T, seed, mode, drift=drift,
                                  observe_times=times, delta=cfg["kernel.delta"])
    except ParticleBlowUp as exc:
        raise CLIError(str(exc), EXIT_BLOWUP) from exc
    if cfg["simulate.write_snapshots"] == "true":
        man.add(write_csv(out / "snapshots.csv", run.csv_rows()))
    R, h = cfg["simulate.R"], cfg["simulate.h"]
    report = {"mode": mode, "N": N, "lattice_points": run.lattice.size, "samples": N * run.lattice.size,
              "times": times, "dt": dt}
    if om.is_zero:
        x = run.positions[:, :, 0, :] - run.lattice.points[0]
        var = x.var(axis=1, ddof=1)
        se = np.sqrt((x**2).var(axis=1, ddof=1) / N)
        expect = 2 * nu * np.asarray(times)
        z = (var - expect[:, None]) / se
        report.update(variance=var, variance_expected=expect, variance_z=z,
                      brownian_ok=bool(np.all(np.abs(z) <= 4)))
        w = recover_vorticity(run.state(t_mid), R, h)
        u = recover_velocity(w, k)
        res = pde_residual(*[recover_vorticity(run.state(s), R, h) for s in times], u, nu, dsnap)
        report.update(residual_l2=res.l2, residual_sup=res.sup, noise=0.0)
    else:
        full, noise, ws, u = half_sample_residual(run, t_mid, dsnap, k, R, h, cfg["simulate.bandwidth_multiplier"])
        w = ws[1]
        total = run.lattice.total
        mass = [wf.total() for wf in ws]
        mass_err = max(float(np.max(np.abs(m - total)) / max(np.max(np.abs(total)), 1e-300)) for m in mass)
        dv = divergence_check(u)
        report.update(residual_l2=full.l2, residual_sup=full.sup, noise=noise,
                      residual_ratio=full.l2 / noise if noise > 0 else math.inf,
                      residual_ok=full.l2 < 3 * noise, mass=[m.tolist() for m in mass],
                      lattice_mass=total, mass_error=mass_err, mass_ok=mass_err < 0.02,
                      max_div=dv.max_div, max_grad=dv.max_grad,
                      divergence_ok=dv.max_div < 0.02 * dv.max_grad, bandwidth=w.meta.get("bandwidth"))
    if run.momentum:
        report["max_momentum"] = max(run.momentum)
    if cfg["omega0.name"] == "lamb_oseen":
        e = compare_lamb_oseen(w, u, cfg["omega0.circulation"], cfg["omega0.t0"], nu, t_mid)
        report.update(omega_l1=e.omega_l1, u_l2=e.u_l2, peak_error=e.peak_error)
    man.add(write_field(out / "omega.ndjson", w, "vorticity"))
    man.add(write_field(out / "velocity.ndjson", u, "velocity"))
    man.add(write_ndjson(out / "simulate_report.ndjson", [report]))
    if args.emit_plot_data and cfg["run.d"] == 2:
        rows = radial_profile(w, u, t_mid, cfg["omega0.circulation"], cfg["omega0.t0"], nu)
        man.add(write_csv(out / "radial_profile.csv",
                          [["r", "omega", "omega_exact", "u_theta", "u_exact"], *rows]))
    print(f"simulated {N * run.lattice.size} particles ({mode}); residual L2 {fmt(report['residual_l2'])}")
    return EXIT_OK


def bound_audit(cfg: RunConfig, kappa: float | None = None) -> list[tuple[str, BoundReport]]:
    """Rows of the zero-drift audit suite (d from the config)."""
    d = cfg["run.d"]
    q = cfg["constants.q"]
    q = default_q(d) if q is None else q
    kappa = cfg["constants.kappa"] if kappa is None else kappa
    t = np.linspace(cfg["bounds.t_min"], cfg["bounds.t_max"], cfg["bounds.n_t"])
    r = np.linspace(0.0, cfg["bounds.r_max"], cfg["bounds.n_r"])
    tt, rr = np.meshgrid(t, r, indexing="ij")
    rows = []
    A_list = cfg["bounds.drift_A"]
    k_min = calibrate_kappa(d, A_list, t, r, q)
    for label, kap in (("config", kappa), ("calibrated", k_min)):
        for A in A_list:
            ratio = float(np.max(sharp_bound_ratio(A, tt, rr, d, q, kap)))
            rows.append((f"sharp_bound[kappa={label}:{fmt(kap)},A={fmt(A)}]",
                         BoundReport.make("sharp_bound", ratio, 0.0, 1.0)))
    gauss = lambda t_, r_: gaussian_kernel(t_, r_, d)  # noqa: E731
    M = cfg["bounds.aronson_M"]
    M = calibrate_aronson_M(gauss, t, r, d) if M == AUTO else M
    worst = aronson_gaussian_worst(M, tt, rr, d)
    rows.append((f"aronson[M={fmt(M)}]", BoundReport.make("aronson", worst, 0.0, 1.0)))
    seed = substream_seed(cfg["run.seed"], "bounds")
    n = cfg["bounds.mc_samples"]
    rho = cfg["bounds.rho"]
    k1 = kappa1(d, q, kappa)
    f = indicator_ball(1.0, 1.0, d)
    points = [np.zeros(d), np.eye(d)[0] * 1.5]
    i = 0
    for tv in cfg["bounds.times"]:
        for g in cfg["bounds.gammas"]:
            if not g < d:
                continue
            for x in points:
                i += 1
                rI = verify_I_bound(f, x, tv, rho, g, None, n_samples=n, seed=seed + i, q=q, kappa1_value=k1)
                rJ = verify_J_bound(f, x, tv, rho, g, None, n_samples=n, seed=seed + i)
                if d == 2:
                    rI.oracle = gaussian_ball_IJ(1.0, 1.0, x, tv, rho, g, d, inner=True)
                    rJ.oracle = gaussian_ball_IJ(1.0, 1.0, x, tv, rho, g, d, inner=False)
                tag = f"t={fmt(tv)},gamma={fmt(g)},x={fmt(x[0])}"
                rows.append((f"I[{tag}]", rI))
                rows.append((f"J[{tag}]", rJ))
    return rows


def cmd_verify_bounds(cfg: RunConfig, args, out: Path, man: Manifest) -> int:
    rows = bound_audit(cfg)
    table = [["name", "lhs_estimate", "lhs_std_error", "rhs_bound", "satisfied", "margin", "oracle"]]
    for name, r in rows:
        table.append([name, r.lhs_estimate, r.lhs_std_error, r.rhs_bound, r.satisfied, r.margin,
                      math.nan if r.oracle is None else r.oracle])
    man.add(write_csv(out / "bounds.csv", table))
    bad = [name for name, r in rows if not r.satisfied]
    print(f"{len(rows) - len(bad)}/{len(rows)} bounds satisfied")
    if bad:
        raise CLIError("violated: " + "; ".join(bad), EXIT_BOUND)
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args, out: Path, man: Manifest) -> int:
    w_path = Path(args.omega) if args.omega else out / "omega.ndjson"
    u_path = Path(args.velocity) if args.velocity else out / "velocity.ndjson"
    try:
        w = read_field(w_path)
        u = read_field(u_path)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot read fields: {exc}", EXIT_CONFIG) from exc
    if w.d != 2 or u.d != 2:
        raise CLIError("compare needs d = 2 fields", EXIT_CONFIG)
    if not w.same_grid(u):
        raise CLIError("vorticity and velocity grids differ", EXIT_CONFIG)
    G, t0, nu = cfg["omega0.circulation"], cfg["omega0.t0"], cfg["run.nu"]
    e = compare_lamb_oseen(w, u, G, t0, nu, w.t)
    rows = radial_profile(w, u, w.t, G, t0, nu)
    man.add(write_csv(out / "compare.csv", [["r", "omega", "omega_exact", "u_theta", "u_exact"], *rows]))
    rec = {"t": w.t, "omega_l1": e.omega_l1, "u_l2": e.u_l2, "peak_error": e.peak_error}
    man.add(write_ndjson(out / "compare_summary.ndjson", [rec]))
    print(f"t={fmt(w.t)} omega_L1={fmt(e.omega_l1)} u_L2={fmt(e.u_l2)} peak={fmt(e.peak_error)}")
    return EXIT_OK


COMMANDS = {
    "constants": cmd_constants,
    "solve-drift": cmd_solve_drift,
    "simulate": cmd_simulate,
    "verify-bounds": cmd_verify_bounds,
    "compare": cmd_compare,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=lambda s: int(s, 0), help="top-level seed (overrides run.seed)")
    common.add_argument("--threads", type=int, default=None, help="worker threads; 1 is the reference mode")
    common.add_argument("--emit-plot-data", action="store_true", help="write radial profile CSV")
    p = argparse.ArgumentParser(prog="randvortex", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("constants", parents=[common], help="structure constants")
    s = sub.add_parser("solve-drift", parents=[common], help="Picard iteration for the drift")
    s.add_argument("--allow-beyond-TK", dest="allow_beyond_TK", action="store_true")
    s = sub.add_parser("simulate", parents=[common], help="particle system and field recovery")
    s.add_argument("--drift", help="drift file (default OUT/drift.ndjson)")
    s.add_argument("--mode", choices=("meanfield", "empirical"), default="meanfield")
    sub.add_parser("verify-bounds", parents=[common], help="audit the heat-kernel and integral bounds")
    s = sub.add_parser("compare", parents=[common], help="compare fields with Lamb-Oseen")
    s.add_argument("--omega", help="vorticity field file (default OUT/omega.ndjson)")
    s.add_argument("--velocity", help="velocity field file (default OUT/velocity.ndjson)")
    return p


def _set_threads(n):
    if n is None:
        return
    import numba

    if n < 1:
        raise CLIError("--threads must be >= 1", EXIT_CONFIG)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be a 64-bit unsigned integer")
            cfg = cfg.replace(**{"run.seed": args.seed})
        _set_threads(args.threads)
        out = _out_dir(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    man = Manifest(out, args.command, cfg.hash, cfg["run.seed"], __version__)
    try:
        code = COMMANDS[args.command](cfg, args, out, man)
    except (ConfigError, ValueError) as exc:
        man.close("failed", EXIT_CONFIG, str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CLIError as exc:
        man.close("failed", exc.code, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    man.close("ok", code)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
