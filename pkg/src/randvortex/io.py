"""Deterministic text output: NDJSON / CSV writers, field files and the run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .sde import DriftField
from .vortex import FieldGrid

__all__ = [
    "fmt",
    "write_csv",
    "write_ndjson",
    "read_ndjson",
    "write_drift",
    "read_drift",
    "write_field",
    "read_field",
    "write_density",
    "sha256_file",
    "Manifest",
]


def fmt(x) -> str:
    """17 significant digits; nan and infinities as bare words."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_json_value(x)}" for k, x in v.items()) + "}"
    if isinstance(v, np.ndarray):
        v = v.ravel().tolist()
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_json_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def ndjson_line(record: dict) -> str:
    """One JSON object with floats at 17 significant digits (non-finite -> null)."""
    return _json_value(record)


def write_ndjson(path, records) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(ndjson_line(r) + "\n")
    return path


def read_ndjson(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return path


def write_drift(path, b: DriftField) -> Path:
    head = {"type": "drift_field", "d": b.d, "R": b.R, "h": b.h, "n": b.n, "dt_grid": b.dt_grid,
            "nt": b.nt, "T": b.T, "sup_norm": b.sup_norm}
    recs = [head] + [{"slice": k, "t": float(t), "values": b.values[k]} for k, t in enumerate(b.times)]
    return write_ndjson(path, recs)


def read_drift(path) -> DriftField:
    recs = read_ndjson(path)
    head = recs[0]
    if head.get("type") != "drift_field":
        raise ValueError(f"{path} is not a drift field file")
    d, n = head["d"], head["n"]
    vals = np.array([r["values"] for r in recs[1:]], dtype=float).reshape(len(recs) - 1, n**d, d)
    return DriftField(head["R"], head["h"], head["dt_grid"], vals)


def write_field(path, f: FieldGrid, kind: str) -> Path:
    head = {"type": "field", "kind": kind, "d": f.d, "R": f.R, "h": f.h, "n": f.n,
            "components": f.flat.shape[1], "nt": 1}
    return write_ndjson(path, [head, {"slice": 0, "t": f.t, "values": f.flat}])


def read_field(path) -> FieldGrid:
    recs = read_ndjson(path)
    head = recs[0]
    if head.get("type") != "field":
        raise ValueError(f"{path} is not a field file")
    d, n, c = head["d"], head["n"], head["components"]
    vals = np.array(recs[1]["values"], dtype=float).reshape((n,) * d + (c,))
    return FieldGrid(head["R"], head["h"], d, vals, recs[1]["t"], {"kind": head.get("kind")})


def write_density(path, axis, density, t) -> Path:
    """One record {"t", "x", "p"} per grid node."""
    axis = np.asarray(axis, dtype=float)
    d = density.ndim
    g = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([c.ravel() for c in g], axis=1)
    return write_ndjson(path, ({"t": t, "x": x, "p": p} for x, p in zip(pts, density.ravel())))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Collects produced files; ``close`` writes manifest.json exactly once."""

    def __init__(self, out_dir, command: str, config_hash: str, seed: int, version: str):
        self.out_dir = Path(out_dir)
        self.command = command
        self.config_hash = config_hash
        self.seed = seed
        self.version = version
        self.start = _now()
        self.files: list[Path] = []
        self.closed = False

    def add(self, path) -> Path:
        path = Path(path)
        self.files.append(path)
        return path

    def close(self, status: str = "ok", exit_code: int = 0, message: str = "") -> Path:
        if self.closed:
            raise RuntimeError("manifest already written")
        self.closed = True
        files = [{"name": os.path.relpath(p, self.out_dir), "sha256": sha256_file(p)}
                 for p in self.files if p.exists()]
        rec = {"type": "manifest", "command": self.command, "config_hash": self.config_hash,
               "code_version": self.version, "seed": str(self.seed), "start": self.start, "end": _now(),
               "status": status, "exit_code": exit_code, "message": message, "files": files}
        return write_ndjson(self.out_dir / "manifest.json", [rec])
