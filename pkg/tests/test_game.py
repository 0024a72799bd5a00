import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from towgame.domain import DomainShape, build_grid
from towgame.dpp import GameParams, ValueField, boundary_field, solve_dpp
from towgame.game import (
    Coin, ConstantStrategy, FieldEvaluator, ZeroStrategy, estimate_value, greedy_strategy,
    mirrored, payoff_bound, play_game, pull_strategy, push_strategy, simulate_batch,
    stopping_time_stats, supermartingale_check, truncation_horizon,
)
from towgame.rng import CounterRNG

from conftest import ones

INTERVAL = DomainShape.interval(-1, 1)


class ForcedRandom:
    """Stream whose coin always selects the random move, which is always +1."""

    def coin(self, k):
        return 0.999

    def ball(self, k, n):
        return np.ones(n)


def test_forced_random_step_exits_in_one_move():
    params = GameParams(3, 1, 0.0, 0.01)
    t = play_game([0.999], ZeroStrategy(), ZeroStrategy(), params, INTERVAL,
                  lambda x: 2 * x[:, 0], ForcedRandom(), 10)
    assert t.tau == 1 and t.coins == [Coin.RANDOM]
    assert t.positions[-1, 0] == pytest.approx(1.009, abs=1e-15)
    assert t.payoff == pytest.approx(2.018, abs=1e-14)  # gamma = 0: no discount


def test_play_game_reproducible_and_valid(figure1_field):
    g, params, u, _ = figure1_field
    sI, sII = greedy_strategy(u, "max", 0, ones), greedy_strategy(u, "min", 0, ones)
    rng = CounterRNG(9)
    for i in range(30):
        a = play_game([0.3], sI, sII, params, INTERVAL, ones, rng.stream(i), 10**6)
        b = play_game([0.3], sI, sII, params, INTERVAL, ones, CounterRNG(9).stream(i), 10**6)
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())
        steps = np.abs(np.diff(a.positions[:, 0]))
        assert np.all(steps <= params.epsilon * (1 + 1e-12))
        assert not INTERVAL.contains(a.positions[-1:])[0]
        assert np.all(INTERVAL.contains(a.positions[:-1]))
        assert abs(a.positions[-1, 0]) <= 1 + params.epsilon
        assert a.payoff == pytest.approx(params.discount ** a.tau)


def test_play_game_matches_batch(figure1_field):
    g, params, u, _ = figure1_field
    sI, sII = greedy_strategy(u, "max", 0, ones), greedy_strategy(u, "min", 0, ones)
    rng = CounterRNG(4)
    batch = simulate_batch([0.3], sI, sII, params, INTERVAL, ones, rng, np.arange(25), 10**6)
    single = [play_game([0.3], sI, sII, params, INTERVAL, ones, rng.stream(i), 10**6) for i in range(25)]
    assert np.array_equal(batch.payoff, [t.payoff for t in single])
    assert np.array_equal(batch.tau, [t.tau for t in single])


def test_play_game_errors():
    params = GameParams(3, 1, 0.0, 0.1)
    with pytest.raises(ValueError):
        play_game([1.5], ZeroStrategy(), ZeroStrategy(), params, INTERVAL, ones, ForcedRandom(), 10)
    with pytest.raises(ValueError):
        play_game([0.0], ZeroStrategy(), ZeroStrategy(), params, INTERVAL, ones, ForcedRandom(), 0)


def test_truncated_game():
    params = GameParams(3, 1, 0.0, 0.1)
    t = play_game([0.0], ZeroStrategy(), ZeroStrategy(), params, INTERVAL, ones,
                  CounterRNG(0).stream(0), 1)
    assert t.truncated and t.payoff == 0.0 or t.tau == 1


def test_constant_payoff_without_discount_is_exact():
    params = GameParams(3, 1, 0.0, 0.1)
    est = estimate_value([0.2], ZeroStrategy(), ConstantStrategy([1.0]), params, INTERVAL, ones, 500, 3)
    assert est.mean == 1.0 and est.std_error == 0.0 and est.truncation_count == 0


def test_discounted_value_grows_towards_boundary():
    params = GameParams(3, 1, 1.0, 0.1)
    z = ZeroStrategy()
    vals = [estimate_value([x], z, z, params, INTERVAL, ones, 4000, 1).mean for x in (0.0, 0.5, 0.9)]
    assert 0 < vals[0] < vals[1] < vals[2] < 1


def test_antisymmetric_payoff_with_mirrored_streams():
    params = GameParams(4, 1, 0.5, 0.1)
    F = lambda x: x[:, 0] * x[:, 0] * x[:, 0]  # exactly odd, unlike a vectorised power
    rng = CounterRNG(21)
    push = push_strategy([0.0], 0.1)
    ids = np.arange(2000)
    a = simulate_batch([0.37], push, ZeroStrategy(), params, INTERVAL, F, rng, ids, 5000)
    b = simulate_batch([-0.37], push, ZeroStrategy(), params, INTERVAL, F, mirrored(rng), ids, 5000)
    assert np.array_equal(a.payoff, -b.payoff)
    assert a.payoff.mean() == -b.payoff.mean()


def test_results_independent_of_threads(figure1_field):
    g, params, u, _ = figure1_field
    sI, sII = greedy_strategy(u, "max", 0, ones), greedy_strategy(u, "min", 0, ones)
    a = estimate_value([0.5], sI, sII, params, INTERVAL, ones, 3000, 8, threads=1)
    b = estimate_value([0.5], sI, sII, params, INTERVAL, ones, 3000, 8, threads=4)
    assert a == b


def test_value_sandwich_and_unilateral_deviation(figure1_field):
    from towgame.game import value_sandwich_margin
    g, params, u, _ = figure1_field
    sI, sII = greedy_strategy(u, "max", 0, ones), greedy_strategy(u, "min", 0, ones)
    i = g.nearest_index([[0.5]])[0]
    est = estimate_value(g.points[i], sI, sII, params, INTERVAL, ones, 20000, 2)
    assert abs(est.mean - u.values[i]) <= value_sandwich_margin(u, 0.0, est.std_error)
    dev = estimate_value(g.points[i], sI, ZeroStrategy(), params, INTERVAL, ones, 20000, 2)
    assert dev.mean >= est.mean - 3 * np.hypot(dev.std_error, est.std_error)


def test_pull_strategy_examples():
    s = pull_strategy([0.0, 0.0], 0.1)
    np.testing.assert_allclose(s.move_batch(np.array([[1.0, 0.0]]), np.zeros(1)), [[-1.0, 0.0]])
    half = s.move_batch(np.array([[0.05, 0.0]]), np.zeros(1))
    np.testing.assert_allclose(half, [[-0.5, 0.0]])
    assert np.allclose(np.array([0.05, 0.0]) + 0.1 * half[0], 0.0)
    np.testing.assert_array_equal(s.move_batch(np.zeros((1, 2)), np.zeros(1)), np.zeros((1, 2)))
    away = push_strategy([0.0, 0.0], 0.1).move_batch(np.array([[0.3, 0.4]]), np.zeros(1))
    np.testing.assert_allclose(away, [[0.6, 0.8]])


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(0.01, 1))
def test_pull_moves_within_unit_ball(x, eps):
    s = pull_strategy([0.2, -0.1], eps).move_batch(np.array([x]), np.zeros(1))
    assert np.linalg.norm(s) <= 1 + 1e-12


def test_greedy_directions_on_disc(disc_field):
    g, params, u, _ = disc_field
    sI, sII = greedy_strategy(u, "max", 0, ones), greedy_strategy(u, "min", 0, ones)
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0.04, 0.64, 100))
    th = rng.uniform(0, 2 * np.pi, 100)
    x = np.stack([r * np.cos(th), r * np.sin(th)], 1)
    up = sI.move_batch(x, np.zeros(100))
    down = sII.move_batch(x, np.zeros(100))
    assert np.all(np.sum(up * x, 1) > 0)
    assert np.all(np.sum(down * x, 1) < 0)
    assert np.all(np.linalg.norm(up, axis=1) <= 1 + 1e-12)


def test_greedy_tie_break_is_first_offset():
    g = build_grid(INTERVAL, 0.2, 0.05)
    params = GameParams(3, 1, 0.0, 0.2)
    u, _ = solve_dpp(g, params, boundary_field(g, ones), init="upper")
    s = greedy_strategy(u, "max", 0, ones)
    node = g.points[g.interior][:5]
    moves = s.move_batch(node, np.zeros(len(node)))
    np.testing.assert_allclose(moves, np.full((5, 1), -1.0))  # smallest offset (-4 h) / eps


def test_field_evaluator_nodes_and_outside(figure1_field):
    g, params, u, _ = figure1_field
    ev = FieldEvaluator(u, lambda x: 5 + x[:, 0])
    inner = g.interior
    np.testing.assert_array_equal(ev(g.points[inner]), u.values[inner])
    np.testing.assert_allclose(ev([[1.05], [-1.0]]), [6.05, 4.0])
    mid = 0.5 * (g.points[inner][:-1] + g.points[inner][1:])
    vals = ev(mid)
    lo = np.minimum(u.values[inner][:-1], u.values[inner][1:])
    hi = np.maximum(u.values[inner][:-1], u.values[inner][1:])
    assert np.all((vals >= lo - 1e-15) & (vals <= hi + 1e-15))


def test_truncation_horizon_bound():
    params = GameParams(3, 1, 0.5, 0.1)
    K = truncation_horizon(params, 2.0)
    assert params.discount**K * 2.0 < 1e-10 <= params.discount ** (K - 1) * 2.0
    assert truncation_horizon(GameParams(3, 1, 0.0, 0.1), 1.0) == 10**8
    assert payoff_bound(INTERVAL, 0.1, lambda x: 3 * x[:, 0]) == pytest.approx(3.3)


def test_supermartingale_closed_form_gamma_zero():
    g = build_grid(INTERVAL, 0.2, 0.05)
    params = GameParams(3, 1, 0.0, 0.2)
    u = ValueField(g, np.ones(g.size))
    eta = 0.01
    stats = supermartingale_check(u, params, ones, eta, 200, 10, [0.1], ZeroStrategy(), 1)
    k = stats.step
    ok = stats.alive > 0
    np.testing.assert_allclose(stats.mean_increment[ok], eta * (2.0 ** -k[ok] - 2.0 ** -(k[ok] - 1)),
                               rtol=0, atol=1e-15)
    assert stats.max_excess() < 0


def test_supermartingale_with_greedy_min(figure1_field):
    g, params, u, _ = figure1_field
    stats = supermartingale_check(u, params, ones, 0.01, 20000, 30, [0.0], ZeroStrategy(), 3)
    assert stats.max_excess() <= 0


def test_stopping_time_examples():
    shape = DomainShape.annulus([0.0, 0.0], 0.25, 1.0)
    params = GameParams(6, 2, 0.0, 0.1)  # alpha = 1/2
    near = stopping_time_stats([0.3, 0.0], pull_strategy([0, 0], 0.1), ZeroStrategy(), params, shape,
                               4000, 1)
    assert near.quantiles["median"] <= 10 and near.truncation_count == 0
    with pytest.raises(ValueError):
        stopping_time_stats([0.1, 0.0], pull_strategy([0, 0], 0.1), ZeroStrategy(), params, shape, 10, 1)
    with pytest.raises(ValueError):
        stopping_time_stats([0.5], pull_strategy([0], 0.1), ZeroStrategy(), GameParams(6, 1, 0, 0.1),
                            DomainShape.interval(-1, 1), 10, 1)


def test_outer_sphere_confinement():
    from towgame.game import _project_into_ball
    old = np.array([[0.95, 0.0], [0.0, 0.9]])
    new = np.array([[1.05, 0.0], [0.3, 1.0]])
    out = _project_into_ball(old, new, np.zeros(2), 1.0)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)
    np.testing.assert_allclose(out[0], [1.0, 0.0])
