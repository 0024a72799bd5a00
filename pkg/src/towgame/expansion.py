"""Small-ball expansion of the DPP operator for smooth test functions.

For smooth ``phi`` with ``D phi(x) != 0``,

    (T phi(x) - phi(x)) / eps^2  ->  Delta_p^N phi(x) / (2 (p+n)) - gamma phi(x)

as ``eps -> 0``. The left side is evaluated without a grid: the ball average by
Gauss quadrature in polar/spherical coordinates, sup and inf by dense sampling
of the ball followed by local refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from .dpp import GameParams

GRADIENT_FLOOR = 1e-8


@dataclass(frozen=True)
class TestFunction:
    """Smooth function with analytic gradient and Hessian (all vectorised over rows)."""

    name: str
    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    quadratic: bool = False


def affine(a, b: float = 0.0) -> TestFunction:
    a = np.asarray(a, dtype=float)
    n = a.size
    return TestFunction(
        "affine", n,
        lambda x: np.atleast_2d(x) @ a + b,
        lambda x: np.broadcast_to(a, np.atleast_2d(x).shape).copy(),
        lambda x: np.zeros((len(np.atleast_2d(x)), n, n)),
        quadratic=True,
    )


def quadratic(Q, a=None, c: float = 0.0, name: str = "quadratic") -> TestFunction:
    """``phi(x) = x.Q.x / 2 + a.x + c`` with symmetric ``Q``."""
    Q = np.asarray(Q, dtype=float)
    Q = 0.5 * (Q + Q.T)
    n = Q.shape[0]
    a = np.zeros(n) if a is None else np.asarray(a, dtype=float)
    return TestFunction(
        name, n,
        lambda x: 0.5 * np.einsum("ki,ij,kj->k", np.atleast_2d(x), Q, np.atleast_2d(x))
        + np.atleast_2d(x) @ a + c,
        lambda x: np.atleast_2d(x) @ Q + a,
        lambda x: np.broadcast_to(Q, (len(np.atleast_2d(x)), n, n)).copy(),
        quadratic=True,
    )


def cosh_product(k) -> TestFunction:
    """``phi(x) = prod_i cosh(k_i x_i)``."""
    k = np.asarray(k, dtype=float)
    n = k.size

    def value(x):
        return np.prod(np.cosh(np.atleast_2d(x) * k), axis=-1)

    def grad(x):
        x = np.atleast_2d(x)
        c, s = np.cosh(x * k), np.sinh(x * k)
        g = np.empty_like(x)
        for i in range(n):
            g[:, i] = k[i] * s[:, i] * np.prod(np.delete(c, i, axis=1), axis=1)
        return g

    def hess(x):
        x = np.atleast_2d(x)
        c, s = np.cosh(x * k), np.sinh(x * k)
        H = np.empty((len(x), n, n))
        for i in range(n):
            for j in range(n):
                f = np.ones(len(x))
                for m in range(n):
                    if m in (i, j):
                        f = f * (k[m] ** 2 * c[:, m] if i == j else k[m] * s[:, m])
                    else:
                        f = f * c[:, m]
                H[:, i, j] = f
        return H

    return TestFunction("cosh_product", n, value, grad, hess)


def registry(dim: int) -> dict[str, TestFunction]:
    """Named test functions in dimension ``dim`` (1, 2 or 3)."""
    if dim not in (1, 2, 3):
        raise ValueError("registered test functions exist for dim 1, 2, 3")
    eye = np.eye(dim)
    Q_mixed = np.array([[2.0, 1.5, 0.0], [1.5, -1.0, 0.5], [0.0, 0.5, 0.5]])[:dim, :dim]
    Q_aniso = np.diag([3.0, -0.5, 1.0][:dim])
    a = np.array([0.7, -0.3, 0.2])[:dim]
    return {
        "affine": affine(a, 1.0),
        "radial_quadratic": quadratic(eye, name="radial_quadratic"),
        "mixed_quadratic": quadratic(Q_mixed, a, 0.5, name="mixed_quadratic"),
        "aniso_quadratic": quadratic(Q_aniso, -a, name="aniso_quadratic"),
        "cosh_product": cosh_product(np.array([1.0, 0.6, 0.4])[:dim]),
    }


def normalized_p_laplacian(phi: TestFunction, x, p: float) -> float:
    """``Delta phi + (p-2) <D^2 phi nu, nu>`` with ``nu = D phi / |D phi|``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g = phi.grad(x)[0]
    H = phi.hess(x)[0]
    nu = g / np.linalg.norm(g)
    return float(np.trace(H) + (p - 2) * nu @ H @ nu)


def _ball_rule(dim: int, order: int = 48):
    """Quadrature nodes on the unit ball and weights summing to one."""
    t, wt = np.polynomial.legendre.leggauss(order)
    r = 0.5 * (t + 1)
    if dim == 1:
        return t[:, None], wt / 2
    if dim == 2:
        m = 4 * order
        th = 2 * np.pi * np.arange(m) / m
        R, TH = np.meshgrid(r, th, indexing="ij")
        W = np.outer(wt * 0.5 * r, np.full(m, 2 * np.pi / m))
        pts = np.stack([R * np.cos(TH), R * np.sin(TH)], axis=-1).reshape(-1, 2)
        W = W.ravel()
        return pts, W / W.sum()
    m = 4 * order
    ph = 2 * np.pi * np.arange(m) / m
    R, CT, PH = np.meshgrid(r, t, ph, indexing="ij")
    ST = np.sqrt(1 - CT**2)
    pts = np.stack([R * ST * np.cos(PH), R * ST * np.sin(PH), R * CT], axis=-1).reshape(-1, 3)
    W = (wt * 0.5 * r**2)[:, None, None] * wt[None, :, None] * np.full(m, 2 * np.pi / m)
    W = W.ravel()
    return pts, W / W.sum()


def _sphere_samples(dim: int, count: int) -> np.ndarray:
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    # Fibonacci sphere
    i = np.arange(count) + 0.5
    z = 1 - 2 * i / count
    ph = np.pi * (1 + 5**0.5) * i
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(ph), s * np.sin(ph), z], axis=-1)


def ball_extremum(phi: TestFunction, x: np.ndarray, radius: float, sign: float) -> float:
    """``sign * max_{|y| <= radius} sign * phi(x + y)`` (sign=+1 for sup, -1 for inf)."""
    n = phi.dim
    shells = np.linspace(0, 1, 41)[1:]
    dirs = _sphere_samples(n, 4096 if n == 2 else 20000)
    cand = (shells[:, None, None] * dirs[None]).reshape(-1, n)
    cand = np.vstack([np.zeros((1, n)), cand])
    vals = sign * phi.value(x + radius * cand)
    start = cand[np.argmax(vals)]
    best = float(vals.max())

    cons = {"type": "ineq", "fun": lambda z: 1 - z @ z, "jac": lambda z: -2 * z}
    res = optimize.minimize(lambda z: -sign * phi.value(x + radius * z[None])[0], start,
                            jac=lambda z: -sign * radius * phi.grad(x + radius * z[None])[0],
                            constraints=[cons], method="SLSQP",
                            options={"ftol": 1e-15, "maxiter": 200})
    z = res.x
    if z @ z > 1:
        z = z / np.linalg.norm(z)
    refined = float(sign * phi.value(x + radius * z[None])[0])
    return sign * max(best, refined)


def expansion_check(phi: TestFunction, x, params: GameParams) -> tuple[float, float]:
    """Return ``(lhs, rhs)``: ``(T phi(x) - phi(x))/eps^2`` and its small-ball limit."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != phi.dim or params.n != phi.dim:
        raise ValueError("dimension mismatch between point, test function and params")
    g = phi.grad(x[None])[0]
    if np.linalg.norm(g) < GRADIENT_FLOOR:
        raise ValueError("gradient vanishes at x; the expansion needs D phi(x) != 0")
    eps = params.epsilon
    pts, w = _ball_rule(phi.dim)
    mean = float(w @ phi.value(x + eps * pts))
    sup = ball_extremum(phi, x, eps, +1.0)
    inf = ball_extremum(phi, x, eps, -1.0)
    f0 = float(phi.value(x[None])[0])
    T = params.discount * (0.5 * params.alpha * (sup + inf) + params.beta * mean)
    lhs = (T - f0) / eps**2
    rhs = normalized_p_laplacian(phi, x, params.p) / (2 * (params.p + params.n)) - params.gamma * f0
    return lhs, rhs
