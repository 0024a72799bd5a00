"""Reference solutions of ``Delta_p^N u - (p+n) gamma u = 0``.

Convention: ``Delta_p^N u = Delta u + (p-2) Delta_inf^N u`` with
``Delta_inf^N u = <D^2u Du/|Du|, Du/|Du|>``. For a radial profile ``u(r)``,
``Delta_inf^N u = u''`` and ``Delta u = u'' + (n-1) u'/r``, so the equation
reduces to the linear ODE

    (p-1) u'' + (n-1)/r u' = (p+n) gamma u.

In one dimension both Laplacians are ``u''`` and the equation is
``(p-1) u'' = (p+1) gamma u`` with closed-form solutions.

These solve the PDE as written. The discounted DPP with parameter ``gamma``
approximates the PDE at ``2*gamma`` (see :func:`towgame.dpp.limit_pde_gamma`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

DEFAULT_MESH = 20_000


@dataclass(frozen=True)
class Oracle1D:
    a: float
    b: float
    A: float
    B: float
    p: float
    gamma: float

    @property
    def mu(self) -> float:
        """Coefficient in ``u'' = mu u``."""
        return (self.p + 1) * self.gamma / (self.p - 1)

    def _coeffs(self):
        k = np.sqrt(self.mu)
        m = 0.5 * (self.a + self.b)
        half = 0.5 * (self.b - self.a)
        # u = c1 cosh(k (x-m)) + c2 sinh(k (x-m)), centred for conditioning
        c1 = 0.5 * (self.A + self.B) / np.cosh(k * half)
        c2 = 0.5 * (self.B - self.A) / np.sinh(k * half)
        return k, m, c1, c2

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.mu == 0:
            t = (x - self.a) / (self.b - self.a)
            return self.A + (self.B - self.A) * t
        k, m, c1, c2 = self._coeffs()
        return c1 * np.cosh(k * (x - m)) + c2 * np.sinh(k * (x - m))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.mu == 0:
            return np.full_like(x, (self.B - self.A) / (self.b - self.a))
        k, m, c1, c2 = self._coeffs()
        return k * (c1 * np.sinh(k * (x - m)) + c2 * np.cosh(k * (x - m)))


def solve_1d(a: float, b: float, A: float, B: float, p: float, gamma: float) -> Oracle1D:
    """Closed-form solution on ``(a, b)`` with ``u(a) = A``, ``u(b) = B``."""
    if not a < b:
        raise ValueError("degenerate interval")
    if not p > 2:
        raise ValueError("p must exceed 2")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return Oracle1D(float(a), float(b), float(A), float(B), float(p), float(gamma))


def solve_linear_bvp(r0: float, r1: float, left, right: float, diffusion: float,
                     drift_dim: float, reaction: float, mesh: int = DEFAULT_MESH):
    """Second-order finite differences for ``D u'' + (d/r) u' = c u`` on ``[r0, r1]``.

    ``left`` is a Dirichlet value, or ``None`` for the symmetry condition
    ``u'(0) = 0`` at ``r0 = 0`` (needs ``drift_dim`` finite). Returns the mesh and
    the nodal values. With ``drift_dim = 0`` this is a plain 1-D two-point problem.
    """
    r = np.linspace(r0, r1, mesh + 1)
    dr = (r1 - r0) / mesh
    N = mesh + 1
    lower = np.zeros(N)
    diag = np.zeros(N)
    upper = np.zeros(N)
    rhs = np.zeros(N)
    ri = r[1:-1]
    drift = drift_dim / ri if drift_dim else np.zeros_like(ri)
    lower[1:-1] = diffusion / dr**2 - drift / (2 * dr)
    upper[1:-1] = diffusion / dr**2 + drift / (2 * dr)
    diag[1:-1] = -2 * diffusion / dr**2 - reaction
    diag[-1] = 1.0
    rhs[-1] = right
    if left is None:
        if r0 != 0:
            raise ValueError("symmetry condition needs r0 = 0")
        # at r=0, (d/r)u' -> d u''(0); ghost node u_{-1} = u_1
        coef = (diffusion + drift_dim) * 2 / dr**2
        diag[0] = -coef - reaction
        upper[0] = coef
    else:
        diag[0] = 1.0
        rhs[0] = left
    ab = np.zeros((3, N))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    u = solve_banded((1, 1), ab, rhs)
    return r, u


@dataclass(frozen=True, eq=False)
class RadialOracle:
    p: float
    n: int
    gamma: float
    r_in: float  # 0 for a full ball
    r_out: float
    inner_value: float | None
    outer_value: float
    r: np.ndarray
    u: np.ndarray
    refinement_change: float

    def __post_init__(self):
        object.__setattr__(self, "_spline", CubicSpline(self.r, self.u))

    def profile(self, radius):
        return self._spline(np.asarray(radius, dtype=float))

    def __call__(self, x, center=None):
        """Evaluate at points ``x`` of shape ``(..., n)``."""
        x = np.asarray(x, dtype=float)
        c = np.zeros(self.n) if center is None else np.asarray(center)
        return self.profile(np.linalg.norm(x - c, axis=-1))

    def ode_residual(self) -> np.ndarray:
        """Discrete residual of the radial ODE at interior mesh points."""
        r, u = self.r, self.u
        dr = r[1] - r[0]
        upp = (u[2:] - 2 * u[1:-1] + u[:-2]) / dr**2
        up = (u[2:] - u[:-2]) / (2 * dr)
        ri = r[1:-1]
        return (self.p - 1) * upp + (self.n - 1) / ri * up - (self.p + self.n) * self.gamma * u[1:-1]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "u"])
            for ri, ui in zip(self.r, self.u):
                w.writerow([repr(float(ri)), repr(float(ui))])


def solve_radial(p: float, n: int, gamma: float, r_out: float, outer_value: float,
                 r_in: float = 0.0, inner_value: float | None = None,
                 mesh: int = DEFAULT_MESH, refine_tol: float = 1e-7) -> RadialOracle:
    """Radial solution on the ball ``B_{r_out}`` (``r_in = 0``) or an annulus.

    The profile is checked against a solve on a mesh twice as fine; a change
    above ``refine_tol`` raises.
    """
    if not p > 2 or gamma < 0:
        raise ValueError("need p > 2 and gamma >= 0")
    if n < 2:
        raise ValueError("radial oracle needs n >= 2; use solve_1d in one dimension")
    if not (0 <= r_in < r_out):
        raise ValueError("need 0 <= r_in < r_out")
    if r_in > 0 and inner_value is None:
        raise ValueError("annulus needs an inner boundary value")
    if r_in == 0 and inner_value is not None:
        raise ValueError("singular geometry: annulus with r_in = 0")
    left = None if r_in == 0 else inner_value
    args = (r_in, r_out, left, outer_value, p - 1, n - 1, (p + n) * gamma)
    r, u = solve_linear_bvp(*args, mesh=mesh)
    _, u_fine = solve_linear_bvp(*args, mesh=2 * mesh)
    change = float(np.max(np.abs(u_fine[::2] - u)))
    if change >= refine_tol:
        raise RuntimeError(f"radial profile not converged under refinement (change {change:.2e})")
    return RadialOracle(p, n, gamma, r_in, r_out, inner_value, outer_value, r, u, change)
