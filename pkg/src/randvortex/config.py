"""Typed INI run configuration with strict key checking and a canonical form."""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


AUTO = "auto"


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _int(s: str) -> int:
    return int(s, 0)


def _floats(s: str) -> tuple:
    return tuple(_float(p) for p in s.replace(";", ",").split(",") if p.strip())


def _auto(conv):
    def parse(s: str):
        return AUTO if s.strip().lower() == AUTO else conv(s)

    parse.__name__ = f"auto_{conv.__name__}"
    return parse


def _opt(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)

    parse.__name__ = f"optional_{conv.__name__}"
    return parse


def _choice(*options):
    def parse(s: str):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    parse.__name__ = "choice"
    return parse


def _positive(v):
    return v == AUTO or v is None or v > 0


def _nonneg(v):
    return v == AUTO or v is None or v >= 0


@dataclass(frozen=True)
class Key:
    conv: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


KERNELS = ("biot_savart_2d", "biot_savart_3d", "riesz", "green")
FIELDS = ("lamb_oseen", "gaussian_blob", "indicator_ball", "point_vortex", "zero")

SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "d": Key(_int, 2, lambda v: v >= 1, "must be >= 1"),
        "nu": Key(_float, 0.5, lambda v: v > 0, "must be > 0"),
        "seed": Key(_int, 0, lambda v: 0 <= v < 2**64, "must be a 64-bit unsigned integer"),
    },
    "kernel": {
        "name": Key(_choice(*KERNELS), "biot_savart_2d"),
        "normalization": Key(_choice("quarter_pi", "unnormalized"), "quarter_pi"),
        "gamma": Key(_opt(_float), None, _nonneg, "must be >= 0"),
        "scale": Key(_float, 1.0),
        "delta": Key(_opt(_float), None, _positive, "must be > 0"),
    },
    "omega0": {
        "name": Key(_choice(*FIELDS), "lamb_oseen"),
        "circulation": Key(_float, 1.0),
        "t0": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "amplitude": Key(_float, 1.0),
        "sigma": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "center": Key(_opt(_floats), None),
        "radius": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "support_radius": Key(_float, 4.0, lambda v: v > 0, "must be > 0"),
    },
    "grids": {
        "R": Key(_float, 4.0, lambda v: v > 0, "must be > 0"),
        "h": Key(_float, 0.25, lambda v: v > 0, "must be > 0"),
        "T": Key(_auto(_float), AUTO, _positive, "must be > 0 or auto"),
        "T_cap": Key(_float, 0.2, lambda v: v > 0, "must be > 0"),
        "dt_grid": Key(_auto(_float), AUTO, _positive, "must be > 0 or auto"),
        "time_slices": Key(_int, 2, lambda v: v >= 1, "must be >= 1"),
    },
    "solver": {
        "dt": Key(_auto(_float), AUTO, _positive, "must be > 0 or auto"),
        "steps_per_slice": Key(_int, 5, lambda v: v >= 1, "must be >= 1"),
        "eps": Key(_float, 0.25, lambda v: v > 0, "must be > 0"),
        "N": Key(_int, 1000, lambda v: v >= 1, "must be >= 1"),
        "M": Key(_int, 200, lambda v: v >= 1, "must be >= 1"),
        "estimator": Key(_choice("direct_simulation", "cameron_martin_weighted"), "direct_simulation"),
        "n_groups": Key(_int, 10, lambda v: v >= 1, "must be >= 1"),
    },
    "simulate": {
        "t": Key(_auto(_float), AUTO, _positive, "must be > 0 or auto"),
        "dt_snap": Key(_auto(_float), AUTO, _positive, "must be > 0 or auto"),
        "R": Key(_float, 5.0, lambda v: v > 0, "must be > 0"),
        "h": Key(_float, 0.25, lambda v: v > 0, "must be > 0"),
        "bandwidth_multiplier": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "write_snapshots": Key(_choice("true", "false"), "true"),
    },
    "constants": {
        "q": Key(_opt(_float), None),
        "kappa": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "alpha": Key(_opt(_float), None),
        "C_beta": Key(_opt(_float), None, _positive, "must be > 0"),
        "C0": Key(_opt(_float), None, _nonneg, "must be >= 0"),
        "C1": Key(_opt(_float), None, _nonneg, "must be >= 0"),
        "Cinf": Key(_opt(_float), None, _nonneg, "must be >= 0"),
        "gamma1": Key(_opt(_float), None, _nonneg, "must be >= 0"),
    },
    "bounds": {
        "t_min": Key(_float, 0.01, lambda v: v > 0, "must be > 0"),
        "t_max": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "n_t": Key(_int, 100, lambda v: v >= 2, "must be >= 2"),
        "r_max": Key(_float, 5.0, lambda v: v > 0, "must be > 0"),
        "n_r": Key(_int, 101, lambda v: v >= 2, "must be >= 2"),
        "drift_A": Key(_floats, (0.0, 0.5, 1.0, 2.0)),
        "aronson_M": Key(_auto(_float), AUTO, lambda v: v == AUTO or v >= 1, "must be >= 1 or auto"),
        "mc_samples": Key(_int, 4000, lambda v: v >= 100, "must be >= 100"),
        "rho": Key(_float, 1.0, lambda v: v > 0, "must be > 0"),
        "gammas": Key(_floats, (0.0, 1.0, 1.5)),
        "times": Key(_floats, (0.01, 0.5, 1.0)),
    },
    "tolerances": {
        "tol_fp": Key(_auto(_float), AUTO, _nonneg, "must be >= 0 or auto"),
        "max_iter": Key(_int, 8, lambda v: v >= 1, "must be >= 1"),
    },
    "output": {
        "dir": Key(str, "out"),
    },
}


def _canonical_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(_canonical_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        sec, k = key.split(".")
        return self.values[sec][k]

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted keys replaced by already-typed values."""
        vals = {s: dict(v) for s, v in self.values.items()}
        for key, v in changes.items():
            sec, k = key.split(".")
            vals[sec][k] = v
        return RunConfig(vals)

    def canonical(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                lines.append(f"{k} = {_canonical_value(self.values[sec][k])}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    """Parse INI text; unknown sections or keys and out-of-range values raise ConfigError."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    vals = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for k, raw in cp.items(sec):
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{k}: unknown key")
            key = SCHEMA[sec][k]
            try:
                v = key.conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{k}: cannot parse {raw!r} ({exc})") from exc
            if key.check is not None and not key.check(v):
                raise ConfigError(f"{sec}.{k}: {key.rule} (got {raw!r})")
            vals[sec][k] = v
    cfg = RunConfig(vals)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: RunConfig):
    d = cfg["run.d"]
    name = cfg["kernel.name"]
    if name == "biot_savart_2d" and d != 2:
        raise ConfigError("kernel.name: biot_savart_2d needs run.d = 2")
    if name == "biot_savart_3d" and d != 3:
        raise ConfigError("kernel.name: biot_savart_3d needs run.d = 3")
    if name == "riesz":
        g = cfg["kernel.gamma"]
        if g is None or not 0 <= g < d:
            raise ConfigError(f"kernel.gamma: riesz needs 0 <= gamma < d = {d}")
    if name == "green" and d < 2:
        raise ConfigError("kernel.name: green needs run.d >= 2")
    if cfg["omega0.name"] == "lamb_oseen" and d != 2:
        raise ConfigError("omega0.name: lamb_oseen is a d = 2 field")
    c = cfg["omega0.center"]
    if c is not None and len(c) != d:
        raise ConfigError(f"omega0.center: expected {d} coordinates")
    if cfg["bounds.t_min"] >= cfg["bounds.t_max"]:
        raise ConfigError("bounds.t_min: must be below bounds.t_max")
    if abs(round(2 * cfg["grids.R"] / cfg["grids.h"]) * cfg["grids.h"] - 2 * cfg["grids.R"]) > 1e-9:
        raise ConfigError("grids.h: must divide 2 * grids.R")
    if abs(round(2 * cfg["simulate.R"] / cfg["simulate.h"]) * cfg["simulate.h"] - 2 * cfg["simulate.R"]) > 1e-9:
        raise ConfigError("simulate.h: must divide 2 * simulate.R")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
