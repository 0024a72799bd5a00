from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from towgame.domain import DomainShape, build_grid
from towgame.dpp import (
    GameParams, Role, ValueField, apply_T, boundary_field, dpp_residual, limit_pde_gamma,
    mean_weights, solve_dpp,
)
from towgame.oracles import solve_1d

from conftest import ones

SHAPES = [DomainShape.interval(-1, 1), DomainShape.ball([0, 0], 1.0)]


def small_grid(dim, eps=0.2):
    return build_grid(SHAPES[dim - 1], eps, eps / 4)


def test_params_validation():
    with pytest.raises(ValueError):
        GameParams(2, 1, 0, 0.1)
    with pytest.raises(ValueError):
        GameParams(3, 1, 50.0, 0.1)  # gamma eps^2 = 1/2
    p = GameParams(3, 1, 0.25, 0.1)
    assert p.alpha == pytest.approx(0.25) and p.alpha + p.beta == 1.0
    assert limit_pde_gamma(0.25) == 0.5


def test_apply_T_hand_example_uniform_mean():
    g = build_grid(DomainShape.interval(-1, 1), 0.5, 0.125)
    params = GameParams(3, 1, 1.0, 0.5)
    u = ValueField(g, g.points[:, 0] ** 2)
    tu = apply_T(u, params, mean_rule="uniform")
    i = int(np.argmin(np.abs(g.points[:, 0])))
    vals = [Fraction(k, 8) ** 2 for k in range(-4, 5)]
    mean = sum(vals) / 9
    expected = Fraction(3, 4) * (Fraction(1, 8) * (max(vals) + min(vals)) + Fraction(3, 4) * mean)
    assert expected == Fraction(21, 256)
    assert tu.values[i] == pytest.approx(float(expected), abs=1e-15)


def test_apply_T_hand_example_moment_mean():
    g = build_grid(DomainShape.interval(-1, 1), 0.5, 0.125)
    params = GameParams(3, 1, 1.0, 0.5)
    tu = apply_T(ValueField(g, g.points[:, 0] ** 2), params)
    i = int(np.argmin(np.abs(g.points[:, 0])))
    r2 = [Fraction(k, 8) ** 2 for k in range(-4, 5)]
    target = Fraction(1, 4) / 3  # n eps^2 / (n + 2)
    # solve sum (1 + b r^2)(r^2 - target) = 0 for b
    b = -sum(x - target for x in r2) / sum(x * (x - target) for x in r2)
    w = [1 + b * x for x in r2]
    mean = sum(wi * x for wi, x in zip(w, r2)) / sum(w)
    assert mean == target
    expected = Fraction(3, 4) * (Fraction(1, 8) * Fraction(1, 4) + Fraction(3, 4) * mean)
    assert tu.values[i] == pytest.approx(float(expected), abs=1e-15)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_moment_weights_match_ball_second_moment(dim):
    from towgame.domain import ball_offsets
    eps, h = 0.2, 0.05
    offs = ball_offsets(eps, h, dim)
    w = mean_weights(offs, h, eps)
    r2 = (offs.astype(float) ** 2).sum(1) * h * h
    assert np.all(w > 0)
    assert w @ r2 / w.sum() == pytest.approx(dim * eps**2 / (dim + 2), rel=1e-12)
    for d in range(dim):  # odd moments vanish by symmetry
        assert abs(w @ offs[:, d]) < 1e-9


@pytest.mark.parametrize("dim", [1, 2])
def test_constants(dim):
    g = small_grid(dim)
    u = ValueField(g, np.full(g.size, 0.7))
    assert np.array_equal(apply_T(u, GameParams(3, dim, 0.0, 0.2)).values, u.values) or \
        np.max(np.abs(apply_T(u, GameParams(3, dim, 0.0, 0.2)).values - 0.7)) < 1e-15
    one = ValueField(g, np.ones(g.size))
    assert np.array_equal(apply_T(one, GameParams(3, dim, 0.0, 0.2)).values, one.values)
    t = apply_T(one, GameParams(3, dim, 2.0, 0.2)).values
    assert np.all(t[g.strip] == 1.0)
    np.testing.assert_allclose(t[g.interior], 1 - 2.0 * 0.04, rtol=0, atol=1e-15)


def test_residual_examples():
    g = small_grid(1, 0.1)
    one = ValueField(g, np.ones(g.size))
    assert dpp_residual(one, GameParams(3, 1, 0.0, 0.1)) == 0.0
    assert dpp_residual(one, GameParams(3, 1, 0.5, 0.1)) == pytest.approx(5e-3, abs=1e-15)


def test_epsilon_mismatch_rejected():
    g = small_grid(1)
    with pytest.raises(ValueError):
        apply_T(ValueField(g, np.ones(g.size)), GameParams(3, 1, 0.0, 0.1))
    with pytest.raises(ValueError):
        apply_T(ValueField(g, np.ones(g.size)), GameParams(3, 2, 0.0, 0.2))


def test_solution_properties_1d(figure1_field):
    g, params, u, rep = figure1_field
    assert rep.converged and u.role is Role.SOLUTION
    assert dpp_residual(u, params) <= 1e-10 * 1.0001
    inner = g.interior
    assert np.all(u.values[inner] < 1) and np.all(u.values <= 1)
    x = g.points[:, 0]
    right = inner & (x >= 0)
    assert np.all(np.diff(u.values[right]) >= 0)  # nondecreasing towards the boundary
    np.testing.assert_allclose(u.values[inner], u.values[inner][::-1], atol=1e-12)
    oracle = solve_1d(-1, 1, 1, 1, 3, limit_pde_gamma(0.25))
    assert np.max(np.abs(u.values[inner] - oracle(x[inner]))) < 0.05


def test_solution_properties_disc(disc_field):
    g, params, u, rep = disc_field
    inner = g.interior
    x, y = g.points.T
    for ray in (inner & (np.abs(y) < 1e-12) & (x >= 0), inner & (np.abs(x - y) < 1e-12) & (x >= 0)):
        order = np.argsort(x[ray])
        assert np.all(np.diff(u.values[ray][order]) >= 0)
    # invariant under the lattice symmetries
    for T in ([[0, 1], [1, 0]], [[-1, 0], [0, 1]]):
        j = g.nearest_index(g.points @ np.array(T, float))
        np.testing.assert_allclose(u.values[j], u.values, atol=1e-12)
    assert 0 < u.values[g.nearest_index([[0, 0]])[0]] < 1


def test_lower_and_upper_starts_agree(disc_field):
    g, params, u, _ = disc_field
    F = boundary_field(g, ones)
    tol = 1e-10
    up, _ = solve_dpp(g, params, F, tol, init="upper")
    bound = 2 * tol / (params.gamma * params.epsilon**2)
    assert np.max(np.abs(up.values - u.values)) <= bound


def test_nonconverged_flagged_and_warm_start(figure1_field):
    g, params, u, _ = figure1_field
    F = boundary_field(g, ones)
    it, rep = solve_dpp(g, params, F, max_iter=5)
    assert not rep.converged and it.role is Role.ITERATE and rep.iterations == 5
    warm, rep2 = solve_dpp(g, params, F, init=u.values)
    assert rep2.converged and rep2.iterations <= 2


def test_nonfinite_boundary_rejected():
    g = small_grid(1)
    with pytest.raises(ValueError):
        boundary_field(g, lambda x: np.full(len(x), np.nan))


def test_gamma_zero_constant_stabilizes_exactly():
    g = small_grid(2)
    params = GameParams(4, 2, 0.0, 0.2)
    F = boundary_field(g, ones)
    u, rep = solve_dpp(g, params, F, init="upper")
    assert np.array_equal(u.values, np.ones(g.size))
    low, rep = solve_dpp(g, params, F, stabilize=True)
    assert rep.converged and rep.residual == 0.0
    assert np.max(np.abs(low.values - 1)) <= 1e-12


def random_boundary(g, rng):
    vals = np.zeros(g.size)
    vals[g.strip] = rng.uniform(-1, 1, g.strip.sum())
    return ValueField(g, vals, Role.BOUNDARY)


@given(st.integers(1, 2), st.floats(0.0, 10.0), st.integers(0, 2**31))
def test_operator_preserves_order(dim, gamma, seed):
    g = small_grid(dim)
    params = GameParams(3, dim, gamma, 0.2)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=g.size)
    v = u + rng.uniform(0, 1, g.size)
    tu = apply_T(ValueField(g, u), params).values
    tv = apply_T(ValueField(g, v), params).values
    assert np.all(tu <= tv)


@given(st.integers(1, 2), st.floats(0.0, 10.0), st.integers(0, 2**31))
def test_operator_contracts(dim, gamma, seed):
    g = small_grid(dim)
    params = GameParams(3, dim, gamma, 0.2)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=g.size)
    v = u.copy()
    v[g.interior] += rng.normal(size=g.interior.sum())
    d_in = np.max(np.abs(u - v))
    d_out = np.max(np.abs(apply_T(ValueField(g, u), params).values
                          - apply_T(ValueField(g, v), params).values))
    assert d_out <= params.discount * d_in + 1e-12


@given(st.integers(1, 2), st.floats(0.5, 10.0), st.integers(0, 2**31))
def test_comparison_and_maximum_principle(dim, gamma, seed):
    g = small_grid(dim)
    params = GameParams(3, dim, gamma, 0.2)
    rng = np.random.default_rng(seed)
    F1 = random_boundary(g, rng)
    F2 = ValueField(g, F1.values + np.where(g.strip, rng.uniform(0, 0.5, g.size), 0), Role.BOUNDARY)
    u1, _ = solve_dpp(g, params, F1)
    u2, _ = solve_dpp(g, params, F2)
    assert np.all(u1.values <= u2.values + 1e-12)
    assert u1.sup_norm(g.interior) <= F1.sup_norm(g.strip) + 1e-12


@given(st.integers(1, 2), st.floats(0.0, 10.0), st.integers(0, 2**31))
def test_iterates_nondecreasing(dim, gamma, seed):
    g = small_grid(dim)
    params = GameParams(3, dim, gamma, 0.2)
    F = random_boundary(g, np.random.default_rng(seed))
    prev = []

    def check(k, vals):
        if prev:
            assert np.all(vals >= prev[-1])
        prev.append(vals.copy())

    solve_dpp(g, params, F, tol=1e-8, max_iter=3000, callback=check)
    assert len(prev) > 1
