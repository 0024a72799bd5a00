"""Dynamic programming principle for the discounted tug-of-war and its value iteration.

The operator acting on a field ``u`` over ``Omega_eps`` is

    T u(x) = (1 - gamma eps^2) * { alpha/2 (max_B u + min_B u) + beta * mean_B u }   x interior
    T u(x) = u(x)                                                                    x in the strip

where ``B`` is the closed lattice ball of radius ``eps`` around ``x``. The
fixed point is found by Jacobi sweeps started from ``-||F||`` in the interior,
which produces a pointwise nondecreasing sequence of iterates.

Scaling note: with ``Delta_p^N u = Delta u + (p-2) Delta_inf^N u`` a Taylor
expansion gives

    T u - u = eps^2 * ( Delta_p^N u / (2 (p+n)) - gamma u ) + o(eps^2),

so the discount ``1 - gamma eps^2`` corresponds to the zeroth-order coefficient
``2 (p+n) gamma`` in the limit equation ``Delta_p^N u = c u``. Use
:func:`limit_pde_gamma` when comparing against :mod:`towgame.oracles`.
"""

from __future__ import annotations

import enum
import logging
import time
import warnings
import weakref
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .domain import DomainGrid

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class GameParams:
    """Game parameters ``(p, n, gamma, epsilon)``.

    ``alpha = (p-2)/(p+n)`` is the tug probability and ``beta`` the random-walk
    probability. ``beta`` is stored as ``1 - alpha`` so that ``alpha + beta``
    is exactly one in floating point.
    """

    p: float
    n: int
    gamma: float
    epsilon: float

    def __post_init__(self):
        if not self.p > 2:
            raise ValueError(f"p must exceed 2, got {self.p}")
        if self.n < 1:
            raise ValueError("dimension n must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.gamma * self.epsilon**2 < 0.5:
            raise ValueError(
                f"gamma*eps^2 = {self.gamma * self.epsilon ** 2:g} violates gamma*eps^2 < 1/2")

    @property
    def alpha(self) -> float:
        return (self.p - 2) / (self.p + self.n)

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    @property
    def discount(self) -> float:
        return 1.0 - self.gamma * self.epsilon**2

    def with_epsilon(self, epsilon: float) -> "GameParams":
        return GameParams(self.p, self.n, self.gamma, epsilon)

    def to_dict(self) -> dict:
        return {"p": self.p, "n": self.n, "gamma": self.gamma, "epsilon": self.epsilon,
                "alpha": self.alpha, "beta": self.beta, "discount": self.discount}


def limit_pde_gamma(gamma: float) -> float:
    """Value of ``gamma`` in ``Delta_p^N u - (p+n) gamma u = 0`` matched by the DPP with discount ``gamma``."""
    return 2.0 * gamma


class Role(str, enum.Enum):
    BOUNDARY = "BoundaryData"
    ITERATE = "Iterate"
    SOLUTION = "Solution"


@dataclass(eq=False)
class ValueField:
    """Values at the active points of a grid (same order as ``grid.points``)."""

    grid: DomainGrid
    values: np.ndarray
    role: Role = Role.ITERATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.size,):
            raise ValueError(f"expected {self.grid.size} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def copy(self, role: Role | None = None) -> "ValueField":
        return ValueField(self.grid, self.values.copy(), role or self.role)

    def sup_norm(self, where: np.ndarray | None = None) -> float:
        v = self.values if where is None else self.values[where]
        return float(np.max(np.abs(v))) if v.size else 0.0


def boundary_field(grid: DomainGrid, F: Callable[[np.ndarray], np.ndarray]) -> ValueField:
    """Sample the payoff ``F`` on the strip; interior entries are zero placeholders."""
    vals = np.zeros(grid.size)
    strip = grid.strip
    vals[strip] = np.asarray(F(grid.points[strip]), dtype=float).reshape(-1)
    return ValueField(grid, vals, Role.BOUNDARY)


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    criterion: str = "residual"

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "criterion": self.criterion}


def mean_weights(offsets: np.ndarray, h: float, epsilon: float, rule: str = "moment") -> np.ndarray:
    """Quadrature weights of the ball average over a lattice stencil.

    ``"uniform"`` is the plain arithmetic mean over the lattice points of the
    closed ball. ``"moment"`` uses ``w = 1 + b |y|^2`` with ``b`` chosen so the
    weighted second moment equals the continuous one, ``n eps^2 / (n+2)``;
    lattice symmetry then makes the rule exact for every quadratic.
    """
    if rule == "uniform":
        return np.ones(len(offsets))
    if rule != "moment":
        raise ValueError(f"unknown mean rule {rule!r}")
    n = offsets.shape[1]
    r2 = (offsets.astype(float) ** 2).sum(axis=1) * h * h
    s0, s2, s4 = len(r2), r2.sum(), (r2 * r2).sum()
    target = n * epsilon**2 / (n + 2)
    b = (target * s0 - s2) / (s4 - target * s2)
    w = 1.0 + b * r2
    if np.any(w <= 0):
        raise ValueError("moment-matched weights are not positive; refine the grid")
    return w


@numba.njit(parallel=True, cache=True)
def _ball_parts(lattice, centers, offsets, weights, weight_sum, mx, mn, mean):
    # per-point reductions in fixed stencil order: bitwise independent of thread count
    for i in numba.prange(centers.size):
        c = centers[i]
        hi = lattice[c + offsets[0]]
        lo = hi
        s = 0.0
        for j in range(offsets.size):
            v = lattice[c + offsets[j]]
            hi = max(hi, v)
            lo = min(lo, v)
            s += weights[j] * v
        mx[i] = hi
        mn[i] = lo
        mean[i] = s / weight_sum


class _Operator:
    """Stencil data evaluating the sup/inf/mean parts of the DPP on a grid."""

    def __init__(self, grid: DomainGrid, mean_rule: str):
        shp = np.array(grid.lattice_shape)
        strides = np.append(np.cumprod(shp[::-1])[:-1][::-1], 1)
        self.flat_offsets = (grid.offsets @ strides).astype(np.int64)
        self.weights = mean_weights(grid.offsets, grid.h, grid.epsilon, mean_rule)
        self.grid = grid
        self.centers = grid.lattice_index[grid.interior]
        # normaliser from the same reduction so constants are reproduced exactly
        self.weight_sum = 1.0
        ones = np.ones(grid.lattice_kind.size)
        self.weight_sum = float(self.parts(ones)[2][0])

    def parts(self, lattice: np.ndarray):
        k = self.centers.size
        mx, mn, mean = np.empty(k), np.empty(k), np.empty(k)
        _ball_parts(lattice.ravel(), self.centers, self.flat_offsets, self.weights,
                    self.weight_sum, mx, mn, mean)
        return mx, mn, mean


_OPERATORS: "weakref.WeakKeyDictionary[DomainGrid, dict]" = weakref.WeakKeyDictionary()


def _operator(grid: DomainGrid, mean_rule: str) -> _Operator:
    ops = _OPERATORS.setdefault(grid, {})
    if mean_rule not in ops:
        ops[mean_rule] = _Operator(grid, mean_rule)
    return ops[mean_rule]


def _check(grid: DomainGrid, params: GameParams):
    if not np.isclose(grid.epsilon, params.epsilon, rtol=1e-12, atol=0):
        raise ValueError(f"grid epsilon {grid.epsilon} does not match params epsilon {params.epsilon}")
    if grid.dim != params.n:
        raise ValueError(f"grid dimension {grid.dim} does not match params n={params.n}")


def _sweep(op: _Operator, params: GameParams, values: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    lattice.ravel()[op.grid.lattice_index] = values
    mx, mn, mean = op.parts(lattice)
    out = values.copy()
    out[op.grid.interior] = params.discount * (0.5 * params.alpha * (mx + mn) + params.beta * mean)
    return out


def apply_T(u: ValueField, params: GameParams, mean_rule: str = "moment") -> ValueField:
    """One application of the DPP operator; strip values are passed through."""
    _check(u.grid, params)
    op = _operator(u.grid, mean_rule)
    lattice = np.zeros(u.grid.lattice_shape)
    return ValueField(u.grid, _sweep(op, params, u.values, lattice), Role.ITERATE)


def dpp_residual(u: ValueField, params: GameParams, mean_rule: str = "moment") -> float:
    """``max |u - T u|`` over interior points."""
    tu = apply_T(u, params, mean_rule)
    interior = u.grid.interior
    return float(np.max(np.abs(u.values[interior] - tu.values[interior])))


def solve_dpp(
    grid: DomainGrid,
    params: GameParams,
    F: ValueField,
    tol: float = DEFAULT_TOL,
    max_iter: int = 1_000_000,
    *,
    init: str | np.ndarray = "lower",
    mean_rule: str = "moment",
    callback: Callable[[int, np.ndarray], None] | None = None,
    record_history: bool = True,
    stabilize: bool = False,
) -> tuple[ValueField, SolveReport]:
    """Fixed point of the DPP by Jacobi value iteration.

    Starts from ``u0 = -||F||`` in the interior (``init="upper"`` uses
    ``+||F||``; an array gives a warm start) and ``F`` on the strip, and stops
    when ``||u_k+1 - u_k|| <= tol`` on the interior. For ``gamma > 0`` this is
    the residual of ``u_k`` and the iteration is a contraction with factor
    ``1 - gamma eps^2``; for ``gamma = 0`` it is only a heuristic stopping rule.

    ``callback(k, values)`` sees every iterate including ``u0``. If
    ``max_iter`` is hit the last iterate is returned with
    ``report.converged = False``.

    With ``stabilize=True`` the sweeps continue past ``tol`` until the iterate
    no longer changes in floating point, so the computed residual is exactly
    zero. Useful for ``gamma = 0``, where the tolerance does not bound the error.
    """
    _check(grid, params)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if F.grid is not grid:
        raise ValueError("boundary data lives on a different grid")
    op = _operator(grid, mean_rule)
    interior = grid.interior
    strip = ~interior
    bound = float(np.max(np.abs(F.values[strip]))) if np.any(strip) else 0.0
    u = np.array(F.values, dtype=float)
    if isinstance(init, str):
        if init not in ("lower", "upper"):
            raise ValueError(f"unknown init {init!r}")
        u[interior] = -bound if init == "lower" else bound
    else:
        u[interior] = np.asarray(init, dtype=float)[interior]
    criterion = "residual" if params.gamma > 0 else "successive-difference"
    if stabilize:
        criterion = "stabilized"
    if params.gamma == 0 and not stabilize:
        warnings.warn("gamma = 0: stopping on successive differences, which does not bound the error",
                      RuntimeWarning, stacklevel=2)

    lattice = np.zeros(grid.lattice_shape)
    history: list[float] = []
    t0 = time.perf_counter()
    if callback is not None:
        callback(0, u)
    k, diff, converged = 0, np.inf, False
    while k < max_iter:
        new = _sweep(op, params, u, lattice)
        k += 1
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite values after sweep {k}")
        diff = float(np.max(np.abs(new[interior] - u[interior])))
        u = new
        if record_history:
            history.append(diff)
        if callback is not None:
            callback(k, u)
        if diff <= tol and (not stabilize or diff == 0.0):
            converged = True
            break
    wall = time.perf_counter() - t0
    if not converged:
        log.warning("value iteration stopped after %d sweeps with residual %.3e > tol %.1e", k, diff, tol)
    log.debug("solve_dpp: %d sweeps, residual %.3e, %.2fs", k, diff, wall)
    report = SolveReport(k, diff, converged, history, wall, criterion)
    return ValueField(grid, u, Role.SOLUTION if converged else Role.ITERATE), report
