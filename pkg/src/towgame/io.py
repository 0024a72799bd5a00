"""Serialization of grids, solved fields, estimates and trajectories.

Floats are written with ``repr`` so that a CSV round trip is exact and output
bytes depend only on the values.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .domain import INTERIOR, DomainGrid, DomainShape, build_grid
from .dpp import GameParams, Role, SolveReport, ValueField

KIND_NAMES = {0: "interior", 1: "strip"}


def clean(obj: Any) -> Any:
    """Convert numpy scalars/arrays to builtins and non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj: Any) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def grid_to_json(grid: DomainGrid) -> dict:
    return grid.describe()


def save_solution(u: ValueField, params: GameParams, stem, report: SolveReport | None = None,
                  extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``stem.json`` (metadata) and ``stem.csv`` (point coordinates, class, value)."""
    stem = Path(stem)
    grid = u.grid
    meta = {"grid": grid.describe(), "params": params.to_dict(), "role": u.role.value}
    if report is not None:
        meta["solve"] = report.to_dict()
    if extra:
        meta.update(extra)
    js = write_json(stem.with_suffix(".json"), meta)
    cols = [f"x{d}" for d in range(grid.dim)]
    kinds = grid.kind
    rows = (list(pt) + [KIND_NAMES[int(k)], v] for pt, k, v in zip(grid.points, kinds, u.values))
    cs = write_csv(stem.with_suffix(".csv"), cols + ["class", "value"], rows)
    return js, cs


def load_solution(stem) -> tuple[ValueField, GameParams]:
    """Inverse of :func:`save_solution`; rebuilds the grid and checks the point set."""
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    g = meta["grid"]
    grid = build_grid(DomainShape.from_dict(g["shape"]), g["epsilon"], g["h"])
    with stem.with_suffix(".csv").open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if len(rows) != grid.size:
        raise ValueError(f"{stem}: {len(rows)} rows, grid has {grid.size} points")
    pts = np.array([[float(v) for v in r[:grid.dim]] for r in rows])
    if not np.allclose(pts, grid.points, rtol=0, atol=1e-9 * grid.h):
        raise ValueError(f"{stem}: point coordinates do not match the rebuilt grid")
    kinds = np.array([r[grid.dim] == "interior" for r in rows])
    if not np.array_equal(kinds, grid.kind == INTERIOR):
        raise ValueError(f"{stem}: point classes do not match the rebuilt grid")
    values = np.array([float(r[grid.dim + 1]) for r in rows])
    p = meta["params"]
    params = GameParams(p["p"], p["n"], p["gamma"], p["epsilon"])
    return ValueField(grid, values, Role(meta["role"])), params


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(clean(r), sort_keys=True, allow_nan=False) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
