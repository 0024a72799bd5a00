"""Named boundary payoffs with their sup norms and Lipschitz constants."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True, eq=False)
class Payoff:
    """Vectorised payoff ``F`` with ``sup |F|`` and Lipschitz bounds on its support."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    sup: float | None = None  # None: unknown a priori
    constant: float | None = None  # set when F is constant

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.fn(x), dtype=float).reshape(len(x))

    @property
    def nonnegative(self) -> bool:
        return self.constant is not None and self.constant >= 0

    def c01_norm(self, pts: np.ndarray) -> float:
        """``sup |F| + Lip(F)``, the sup taken over ``pts`` when not known analytically."""
        sup = self.sup if self.sup is not None else float(np.max(np.abs(self(pts))))
        return sup + self.lipschitz


def constant(value: float) -> Payoff:
    v = float(value)
    return Payoff(f"constant({v:g})", lambda x: np.full(len(x), v), 0.0, abs(v), v)


def affine(a, b: float = 0.0) -> Payoff:
    a = np.asarray(a, dtype=float)
    return Payoff("affine", lambda x: x @ a + b, float(np.linalg.norm(a)))


def cosine(k, amplitude: float = 1.0, offset: float = 0.0) -> Payoff:
    """``offset + amplitude * prod_i cos(k_i x_i)``."""
    k = np.asarray(k, dtype=float)
    amp = float(amplitude)
    return Payoff("cosine", lambda x: offset + amp * np.prod(np.cos(x * k), axis=-1),
                  abs(amp) * float(np.linalg.norm(k)), abs(offset) + abs(amp))


def samples(points, values) -> Payoff:
    """Nearest-sample evaluation of scattered data.

    The Lipschitz constant is the largest difference quotient between each
    sample and its nearest neighbours, an empirical stand-in.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.asarray(values, dtype=float).reshape(-1)
    if len(pts) != len(vals) or len(vals) == 0:
        raise ValueError("need one value per sample point")
    tree = cKDTree(pts)
    lip = 0.0
    if len(pts) > 1:
        k = min(len(pts), 5)
        d, j = tree.query(pts, k=k)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.abs(vals[j[:, 1:]] - vals[:, None]) / d[:, 1:]
        q = q[np.isfinite(q)]
        lip = float(q.max()) if q.size else 0.0
    const = float(vals[0]) if np.all(vals == vals[0]) else None
    return Payoff("samples", lambda x: vals[tree.query(x)[1]], lip, float(np.max(np.abs(vals))), const)


def load_samples(path) -> Payoff:
    """CSV with columns ``x0..x{n-1}, value`` and a header row."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(v) for v in r] for r in rows if r])
    return samples(data[:, :-1], data[:, -1])
