"""Bounded domains, their outer epsilon-strip, and the uniform lattice on which fields live.

A grid covers ``Omega_eps = Omega U Gamma_eps`` where ``Gamma_eps`` is the set of
points outside the (open) domain within distance ``epsilon`` of its boundary.
Lattice points are anchored at the centre of the shape so that symmetric shapes
give symmetric grids.
"""

from __future__ import annotations

import itertools
from functools import cached_property
from dataclasses import dataclass, field
from typing import Any

import numpy as np

INTERIOR = 0
STRIP = 1
OUTSIDE = -1

# relative slack (in units of epsilon) used when classifying lattice points
_SNAP = 1e-9


@dataclass(frozen=True)
class DomainShape:
    """An analytic bounded domain: interval, box, ball or annulus.

    Use the ``interval``/``box``/``ball``/``annulus`` constructors rather than
    building instances by hand.
    """

    kind: str
    dim: int
    params: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if self.kind not in ("interval", "box", "ball", "annulus"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        vals = np.concatenate([np.asarray(p, dtype=float) for p in self.params])
        if not np.all(np.isfinite(vals)):
            raise ValueError("domain bounds must be finite")
        if self.kind in ("interval", "box"):
            lo, hi = (np.asarray(p) for p in self.params)
            if lo.shape != (self.dim,) or hi.shape != (self.dim,):
                raise ValueError("box bounds must match the dimension")
            if np.any(lo >= hi):
                raise ValueError("box bounds must satisfy lo < hi")
        elif self.kind == "ball":
            center, (radius,) = self.params
            if len(center) != self.dim or radius <= 0:
                raise ValueError("ball needs a centre of matching dimension and radius > 0")
        else:
            center, (r_in, r_out) = self.params
            if len(center) != self.dim or not 0 < r_in < r_out:
                raise ValueError("annulus needs 0 < r_in < r_out")

    @classmethod
    def interval(cls, a: float, b: float) -> "DomainShape":
        return cls("interval", 1, ((float(a),), (float(b),)))

    @classmethod
    def box(cls, lo, hi) -> "DomainShape":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        return cls("box", len(lo), (lo, hi))

    @classmethod
    def ball(cls, center, radius: float) -> "DomainShape":
        center = tuple(float(v) for v in np.atleast_1d(center))
        return cls("ball", len(center), (center, (float(radius),)))

    @classmethod
    def annulus(cls, center, r_in: float, r_out: float) -> "DomainShape":
        center = tuple(float(v) for v in np.atleast_1d(center))
        return cls("annulus", len(center), (center, (float(r_in), float(r_out))))

    @property
    def center(self) -> np.ndarray:
        if self.kind in ("interval", "box"):
            lo, hi = self.params
            return 0.5 * (np.asarray(lo) + np.asarray(hi))
        return np.asarray(self.params[0], dtype=float)

    @property
    def half_extent(self) -> np.ndarray:
        """Half-widths of the bounding box, per axis."""
        if self.kind in ("interval", "box"):
            lo, hi = self.params
            return 0.5 * (np.asarray(hi) - np.asarray(lo))
        return np.full(self.dim, self.params[1][-1])

    def signed_distance(self, x) -> np.ndarray:
        """Signed distance to the boundary; negative inside, positive outside.

        ``x`` has shape ``(..., dim)``. Outside the domain the value is the exact
        Euclidean distance to the boundary.
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}")
        if self.kind in ("interval", "box"):
            q = np.abs(x - self.center) - self.half_extent
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        r = np.linalg.norm(x - self.center, axis=-1)
        if self.kind == "ball":
            return r - self.params[1][0]
        r_in, r_out = self.params[1]
        return np.maximum(r_in - r, r - r_out)

    def contains(self, x) -> np.ndarray:
        """Membership in the open domain."""
        return self.signed_distance(x) < 0.0

    def boundary_projection(self, x) -> np.ndarray:
        """Nearest boundary point for each row of ``x``."""
        x = np.asarray(x, dtype=float)
        c = self.center
        if self.kind in ("interval", "box"):
            lo, hi = (np.asarray(p) for p in self.params)
            inside = self.contains(x)
            out = np.clip(x, lo, hi)
            if np.any(inside):
                xi = x[inside]
                gaps = np.concatenate([xi - lo, hi - xi], axis=-1)
                k = np.argmin(gaps, axis=-1)
                proj = xi.copy()
                rows = np.arange(len(xi))
                axis = k % self.dim
                proj[rows, axis] = np.where(k < self.dim, lo[axis], hi[axis])
                out[inside] = proj
            return out
        d = x - c
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        e = np.where(r > 0, d / np.where(r > 0, r, 1.0), np.eye(self.dim)[0])
        if self.kind == "ball":
            return c + e * self.params[1][0]
        r_in, r_out = self.params[1]
        target = np.where(np.abs(r - r_in) <= np.abs(r - r_out), r_in, r_out)
        return c + e * target

    def to_dict(self) -> dict[str, Any]:
        if self.kind in ("interval", "box"):
            lo, hi = self.params
            if self.kind == "interval":
                return {"kind": "interval", "a": lo[0], "b": hi[0]}
            return {"kind": "box", "lo": list(lo), "hi": list(hi)}
        if self.kind == "ball":
            return {"kind": "ball", "center": list(self.params[0]), "radius": self.params[1][0]}
        return {"kind": "annulus", "center": list(self.params[0]),
                "r_in": self.params[1][0], "r_out": self.params[1][1]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainShape":
        kind = d["kind"]
        if kind == "interval":
            return cls.interval(d["a"], d["b"])
        if kind == "box":
            return cls.box(d["lo"], d["hi"])
        if kind == "ball":
            return cls.ball(d["center"], d["radius"])
        if kind == "annulus":
            return cls.annulus(d["center"], d["r_in"], d["r_out"])
        raise ValueError(f"unknown domain kind {kind!r}")


def ball_offsets(epsilon: float, h: float, dim: int) -> np.ndarray:
    """Integer lattice offsets ``o`` with ``|o| h <= epsilon``, lexicographically sorted."""
    m = int(np.floor(epsilon / h + _SNAP))
    r2 = (epsilon / h) ** 2 * (1 + _SNAP)
    rng = range(-m, m + 1)
    offs = [o for o in itertools.product(rng, repeat=dim) if sum(k * k for k in o) <= r2]
    return np.array(offs, dtype=np.int64).reshape(-1, dim)


@dataclass(frozen=True, eq=False)
class DomainGrid:
    """Lattice discretisation of ``Omega_eps``.

    The lattice is the full bounding box ``center + k*h``; only points of
    ``Omega_eps`` are *active*. Active points are numbered in lexicographic
    (C) order, ``kind[i]`` is ``INTERIOR`` or ``STRIP``.
    """

    shape: DomainShape
    epsilon: float
    h: float
    axes: tuple[np.ndarray, ...]
    lattice_kind: np.ndarray  # int8 per lattice point: INTERIOR/STRIP/OUTSIDE
    offsets: np.ndarray  # ball stencil in lattice units
    lattice_index: np.ndarray = field(init=False)
    position: np.ndarray = field(init=False)

    def __post_init__(self):
        flat = np.flatnonzero(self.lattice_kind.ravel() >= 0)
        pos = np.full(self.lattice_kind.size, -1, dtype=np.int64)
        pos[flat] = np.arange(len(flat))
        object.__setattr__(self, "lattice_index", flat)
        object.__setattr__(self, "position", pos)
        for arr in (self.lattice_kind, self.offsets, flat, pos):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.shape.dim

    @property
    def lattice_shape(self) -> tuple[int, ...]:
        return self.lattice_kind.shape

    @property
    def size(self) -> int:
        return len(self.lattice_index)

    @cached_property
    def kind(self) -> np.ndarray:
        return self.lattice_kind.ravel()[self.lattice_index]

    @property
    def interior(self) -> np.ndarray:
        return self.kind == INTERIOR

    @property
    def strip(self) -> np.ndarray:
        return self.kind == STRIP

    @cached_property
    def multi_index(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.lattice_index, self.lattice_shape), axis=-1)

    @cached_property
    def points(self) -> np.ndarray:
        mi = self.multi_index
        return np.stack([self.axes[d][mi[:, d]] for d in range(self.dim)], axis=-1)

    @property
    def origin(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    def to_lattice(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Scatter per-point values onto the full lattice array."""
        out = np.full(self.lattice_kind.size, fill, dtype=float)
        out[self.lattice_index] = values
        return out.reshape(self.lattice_shape)

    def from_lattice(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr).ravel()[self.lattice_index]

    def nearest_index(self, x: np.ndarray) -> np.ndarray:
        """Nearest active point for each row of ``x`` (``-1`` if the nearest lattice point is inactive)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = np.rint((x - self.origin) / self.h).astype(np.int64)
        shp = np.array(self.lattice_shape)
        ok = np.all((k >= 0) & (k < shp), axis=-1)
        k = np.clip(k, 0, shp - 1)
        flat = np.ravel_multi_index(tuple(k.T), self.lattice_shape)
        return np.where(ok, self.position[flat], -1)

    def describe(self) -> dict[str, Any]:
        kind = self.kind
        return {
            "shape": self.shape.to_dict(),
            "dim": self.dim,
            "epsilon": self.epsilon,
            "h": self.h,
            "points": int(self.size),
            "interior": int(np.sum(kind == INTERIOR)),
            "strip": int(np.sum(kind == STRIP)),
            "stencil": int(len(self.offsets)),
        }


def build_grid(shape: DomainShape, epsilon: float, h: float) -> DomainGrid:
    """Lattice over ``Omega_eps`` with spacing ``h``; requires ``h <= epsilon/4``."""
    if not (epsilon > 0 and h > 0):
        raise ValueError("epsilon and h must be positive")
    if h > epsilon / 4 * (1 + _SNAP):
        raise ValueError(f"grid spacing h={h} is coarser than epsilon/4={epsilon / 4}")
    n = shape.dim
    c, half = shape.center, shape.half_extent
    axes = []
    for d in range(n):
        k = int(np.floor((half[d] + epsilon) / h + _SNAP))
        axes.append(c[d] + h * np.arange(-k, k + 1))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sd = shape.signed_distance(mesh)
    tol = _SNAP * epsilon
    kind = np.full(sd.shape, OUTSIDE, dtype=np.int8)
    kind[sd <= epsilon + tol] = STRIP
    kind[sd < -tol] = INTERIOR
    if not np.any(kind == INTERIOR):
        raise ValueError("grid resolves no interior point; refine h")
    offsets = ball_offsets(epsilon, h, n)
    grid = DomainGrid(shape, float(epsilon), float(h), tuple(axes), kind, offsets)
    _check_closed_balls(grid)
    return grid


def _check_closed_balls(grid: DomainGrid) -> None:
    # every stencil point of an interior point must be an active lattice point
    kind = grid.lattice_kind
    m = int(np.abs(grid.offsets).max()) if len(grid.offsets) else 0
    padded = np.pad(kind, m, constant_values=OUTSIDE)
    interior = kind == INTERIOR
    for o in grid.offsets:
        sl = tuple(slice(m + int(k), m + int(k) + s) for k, s in zip(o, kind.shape))
        if np.any(interior & (padded[sl] == OUTSIDE)):
            raise AssertionError("ball stencil of an interior point leaves Omega_eps")


def ball_neighbors(grid: DomainGrid, i: int) -> np.ndarray:
    """Active indices ``j`` with ``|x_j - x_i| <= epsilon`` (``i`` included), ascending."""
    if not 0 <= i < grid.size:
        raise IndexError(f"point index {i} out of range")
    base = grid.multi_index[i]
    k = base + grid.offsets
    shp = np.array(grid.lattice_shape)
    ok = np.all((k >= 0) & (k < shp), axis=-1)
    flat = np.ravel_multi_index(tuple(k[ok].T), grid.lattice_shape)
    j = grid.position[flat]
    return np.sort(j[j >= 0])
