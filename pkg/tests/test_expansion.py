import numpy as np
import pytest
from hypothesis import given, strategies as st

from towgame.dpp import GameParams
from towgame.expansion import (
    affine, ball_extremum, cosh_product, expansion_check, normalized_p_laplacian, quadratic, registry,
)

EPS = [0.2, 0.1, 0.05, 0.025]


def test_affine_without_discount_has_zero_limit():
    phi = affine([0.6, -0.8], 0.3)
    for eps in EPS:
        lhs, rhs = expansion_check(phi, [0.1, 0.2], GameParams(4, 2, 0.0, eps))
        assert rhs == 0.0 and abs(lhs) < 1e-9


def test_radial_quadratic_target_one_third():
    phi = quadratic(np.eye(2))
    errs = []
    for eps in [0.1, 0.05, 0.025]:
        lhs, rhs = expansion_check(phi, [1.0, 0.0], GameParams(4, 2, 0.0, eps))
        assert rhs == pytest.approx(1 / 3, abs=1e-15)
        errs.append(abs(lhs - rhs))
    assert errs[-1] < 1e-6


def test_discount_term_has_unit_coefficient():
    phi = affine([0.7], 1.0)  # phi(0) = 1
    for eps in EPS:
        lhs, rhs = expansion_check(phi, [0.0], GameParams(3, 1, 1.0, eps))
        assert rhs == -1.0
        assert lhs == pytest.approx(-1.0, abs=1e-9)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_quadratic_errors_shrink(dim):
    x = np.array([0.3, -0.2, 0.1])[:dim]
    for name, phi in registry(dim).items():
        errs = [abs(np.subtract(*expansion_check(phi, x, GameParams(3, dim, 1.0, e)))) for e in EPS]
        for a, b in zip(errs, errs[1:]):
            assert b <= 1e-9 or b / a <= 0.75, (name, errs)


def test_critical_point_refused():
    with pytest.raises(ValueError):
        expansion_check(quadratic(np.eye(2)), [0.0, 0.0], GameParams(4, 2, 0.0, 0.1))
    with pytest.raises(ValueError):
        expansion_check(quadratic(np.eye(2)), [0.1], GameParams(4, 2, 0.0, 0.1))


def test_normalized_p_laplacian_values():
    phi = quadratic(np.diag([2.0, -1.0]))
    # gradient along e1 at (1, 0): Delta = 1, directional second derivative = 2
    assert normalized_p_laplacian(phi, [1.0, 0.0], 5) == pytest.approx(1 + 3 * 2)


def test_test_function_derivatives():
    for dim in (1, 2, 3):
        for phi in registry(dim).values():
            x = np.array([0.3, -0.2, 0.1])[:dim]
            h = 1e-5
            g = phi.grad(x[None])[0]
            H = phi.hess(x[None])[0]
            for i in range(dim):
                e = np.eye(dim)[i] * h
                fd = (phi.value((x + e)[None]) - phi.value((x - e)[None]))[0] / (2 * h)
                assert fd == pytest.approx(g[i], abs=1e-7)
                gd = (phi.grad((x + e)[None]) - phi.grad((x - e)[None]))[0] / (2 * h)
                np.testing.assert_allclose(gd, H[i], atol=1e-6)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 0.3))
def test_ball_extremum_bounds_samples(a, b, radius):
    phi = cosh_product([1.0, 0.6])
    x = np.array([a, b])
    hi = ball_extremum(phi, x, radius, 1.0)
    lo = ball_extremum(phi, x, radius, -1.0)
    th = np.linspace(0, 2 * np.pi, 64)
    pts = x + radius * np.stack([np.cos(th), np.sin(th)], 1)
    vals = phi.value(pts)
    assert hi >= vals.max() - 1e-12 and lo <= vals.min() + 1e-12
    assert lo <= phi.value(x[None])[0] <= hi
