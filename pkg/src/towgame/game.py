"""Monte Carlo simulation of the discounted tug-of-war in continuous space.

Each turn a uniform ``xi`` decides the move from ``X_k``:

* ``xi < alpha/2``           Player I moves the token by ``eps * s_I``,
* ``alpha/2 <= xi < alpha``  Player II moves it by ``eps * s_II``,
* ``xi >= alpha``            it moves by ``eps * w`` with ``w`` uniform in the unit ball.

The game stops at the first position outside the open domain, which lies in the
strip because steps never exceed ``eps``; Player II then pays
``(1 - gamma eps^2)^tau F(X_tau)``.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .domain import DomainGrid, DomainShape, build_grid
from .dpp import GameParams, ValueField
from .rng import CounterRNG

Payoff = Callable[[np.ndarray], np.ndarray]

GAMMA_ZERO_STEP_CAP = 10**8
TRUNCATION_TOL = 1e-10
_MAX_CHUNK = 1 << 17


class Coin(str, enum.Enum):
    PLAYER_I = "I"
    PLAYER_II = "II"
    RANDOM = "0"


@dataclass
class GameHistory:
    positions: list[np.ndarray]
    coins: list[Coin] = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.coins)

    @property
    def current(self) -> np.ndarray:
        return self.positions[-1]


class Strategy:
    """Deterministic move rule returning a displacement in the closed unit ball.

    Subclasses implement :meth:`move_batch`, which depends only on the current
    position and the turn index; such strategies can be simulated in bulk.
    Strategies that need the full history override :meth:`__call__` and set
    ``markov = False``.
    """

    label = "strategy"
    markov = True

    def move_batch(self, x: np.ndarray, k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, history: GameHistory) -> np.ndarray:
        x = np.asarray(history.current, dtype=float)[None]
        return self.move_batch(x, np.array([history.step]))[0]

    def __repr__(self):
        return f"<{type(self).__name__} {self.label}>"


class ZeroStrategy(Strategy):
    label = "zero"

    def move_batch(self, x, k):
        return np.zeros_like(x)


class ConstantStrategy(Strategy):
    """Always step the full length in one fixed direction."""

    def __init__(self, direction):
        d = np.asarray(direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        self.label = "constant(" + ",".join(f"{t:.3g}" for t in self.direction) + ")"

    def move_batch(self, x, k):
        return np.broadcast_to(self.direction, x.shape).copy()


class PullStrategy(Strategy):
    """Step toward ``target``; a short final step lands exactly on it."""

    def __init__(self, target, epsilon: float, away: bool = False):
        self.target = np.asarray(target, dtype=float)
        self.epsilon = float(epsilon)
        self.away = away
        self.label = ("push" if away else "pull") + "(" + ",".join(f"{t:g}" for t in self.target) + ")"

    def move_batch(self, x, k):
        d = (self.target - x) / self.epsilon
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        if self.away:
            return -np.where(norm > 0, d / np.where(norm > 0, norm, 1.0), 0.0)
        return np.where(norm > 1.0, d / np.maximum(norm, 1.0), d)


def pull_strategy(target, epsilon: float) -> PullStrategy:
    return PullStrategy(target, epsilon)


def push_strategy(target, epsilon: float) -> PullStrategy:
    """Full step directly away from ``target`` (zero move when sitting on it)."""
    return PullStrategy(target, epsilon, away=True)


@numba.njit(cache=True)
def _interp_kernel(t, lattice, shape, strides, corners, out):
    m, n = t.shape
    base = np.empty(n, dtype=np.int64)
    frac = np.empty(n)
    for i in range(m):
        for d in range(n):
            v = t[i, d]
            r = np.rint(v)
            if abs(v - r) < 1e-9:
                v = r
            b = int(np.floor(v))
            b = min(max(b, 0), shape[d] - 2)
            base[d] = b
            frac[d] = v - b
        acc = 0.0
        for c in range(corners.shape[0]):
            w = 1.0
            flat = 0
            for d in range(n):
                if corners[c, d] == 1:
                    w *= frac[d]
                else:
                    w *= 1.0 - frac[d]
                flat += (base[d] + corners[c, d]) * strides[d]
            if w != 0.0:
                acc += w * lattice[flat]
        out[i] = acc


class FieldEvaluator:
    """Continuous extension of a grid field.

    Inside the domain: multilinear interpolation of lattice values (points
    within ``1e-9 h`` of a lattice node snap to it). Outside: the payoff
    ``F`` when given, else the value at the nearest active lattice point.
    """

    def __init__(self, u: ValueField, payoff: Payoff | None = None):
        self.grid = u.grid
        self.payoff = payoff
        self.lattice = np.ascontiguousarray(u.grid.to_lattice(u.values).ravel())
        self._origin = u.grid.origin
        self._shape = np.array(u.grid.lattice_shape, dtype=np.int64)
        self._strides = np.append(np.cumprod(self._shape[::-1])[:-1][::-1], 1).astype(np.int64)
        n = u.grid.dim
        self._corners = np.array(list(np.ndindex(*(2,) * n)), dtype=np.int64)

    def interpolate(self, y: np.ndarray) -> np.ndarray:
        t = (y - self._origin) / self.grid.h
        out = np.empty(len(y))
        _interp_kernel(np.ascontiguousarray(t), self.lattice, self._shape, self._strides,
                       self._corners, out)
        return out

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        inside = self.grid.shape.contains(y)
        out = np.empty(len(y))
        if np.any(inside):
            out[inside] = self.interpolate(y[inside])
        if np.any(~inside):
            yo = y[~inside]
            if self.payoff is not None:
                out[~inside] = self.payoff(yo)
            else:
                idx = self.grid.nearest_index(yo)
                if np.any(idx < 0):
                    raise ValueError("point outside Omega_eps")
                out[~inside] = self.lattice[self.grid.lattice_index[idx]]
        return out


class GreedyStrategy(Strategy):
    """Move to the best point of ``x + h*o`` over lattice offsets ``|o| h <= eps``.

    From a lattice node the candidates are exactly the grid points of the closed
    ball. Ties go to the lexicographically smallest offset, i.e. the smallest
    grid index. ``eta`` is the tolerated gap to the exact ball optimum; the
    argmax over candidates is exact, so it only enters error budgets.
    """

    def __init__(self, u: ValueField, mode: str, eta: float = 0.0, payoff: Payoff | None = None):
        if mode not in ("max", "min"):
            raise ValueError("mode must be 'max' or 'min'")
        if eta < 0:
            raise ValueError("eta must be nonnegative")
        self.u = u
        self.mode = mode
        self.eta = eta
        self.evaluate = FieldEvaluator(u, payoff)
        self.steps = u.grid.offsets * u.grid.h
        self.moves = self.steps / u.grid.epsilon
        self.label = f"greedy-{mode}"

    def move_batch(self, x, k):
        x = np.atleast_2d(x)
        out = np.empty_like(x)
        S = len(self.steps)
        per = max(1, 2_000_000 // S)
        for a in range(0, len(x), per):
            xb = x[a:a + per]
            cand = (xb[:, None, :] + self.steps[None]).reshape(-1, x.shape[1])
            vals = self.evaluate(cand).reshape(len(xb), S)
            j = np.argmax(vals, axis=1) if self.mode == "max" else np.argmin(vals, axis=1)
            out[a:a + per] = self.moves[j]
        return out


def greedy_strategy(u: ValueField, mode: str, eta: float = 0.0, payoff: Payoff | None = None) -> GreedyStrategy:
    return GreedyStrategy(u, mode, eta, payoff)


@dataclass
class GameTrajectory:
    positions: np.ndarray
    coins: list[Coin]
    tau: int
    payoff: float
    truncated: bool = False

    def to_json(self) -> dict:
        return {"positions": self.positions.tolist(), "coins": [c.value for c in self.coins],
                "tau": self.tau, "payoff": self.payoff, "truncated": self.truncated}


def discount_factor(params: GameParams, tau) -> np.ndarray:
    """``(1 - gamma eps^2)^tau`` elementwise, identical for scalar and batched callers."""
    return np.power(params.discount, np.atleast_1d(tau).astype(np.float64))


def terminal_payoff(params: GameParams, tau: int, x_tau, F: Payoff) -> float:
    return float(discount_factor(params, [tau])[0] * F(np.atleast_2d(x_tau))[0])


def play_game(x0, sI: Strategy, sII: Strategy, params: GameParams, shape: DomainShape,
              F: Payoff, stream, max_steps: int) -> GameTrajectory:
    """Play one game from ``x0``; ``stream`` supplies ``coin(k)`` and ``ball(k, n)``."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    if not shape.contains(x[None])[0]:
        raise ValueError("starting point must lie in the open domain")
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    hist = GameHistory([x])
    half, alpha, eps = 0.5 * params.alpha, params.alpha, params.epsilon
    for k in range(max_steps):
        xi = stream.coin(k)
        if xi < half:
            coin, s = Coin.PLAYER_I, sI(hist)
        elif xi < alpha:
            coin, s = Coin.PLAYER_II, sII(hist)
        else:
            coin, s = Coin.RANDOM, stream.ball(k, params.n)
        x = x + eps * np.asarray(s, dtype=float)
        hist.positions.append(x)
        hist.coins.append(coin)
        if not shape.contains(x[None])[0]:
            tau = k + 1
            return GameTrajectory(np.array(hist.positions), hist.coins, tau,
                                  terminal_payoff(params, tau, x, F))
    return GameTrajectory(np.array(hist.positions), hist.coins, max_steps, 0.0, truncated=True)


def truncation_horizon(params: GameParams, payoff_bound: float, tol: float = TRUNCATION_TOL) -> int:
    """Steps after which the discounted payoff is below ``tol``."""
    if params.gamma == 0 or payoff_bound <= tol:
        return GAMMA_ZERO_STEP_CAP if params.gamma == 0 else 1
    return max(1, math.ceil(math.log(tol / payoff_bound) / math.log(params.discount)))


def payoff_bound(shape: DomainShape, epsilon: float, F: Payoff) -> float:
    """``max |F|`` over a lattice sampling of the strip."""
    grid = build_grid(shape, epsilon, epsilon / 4)
    pts = grid.points[grid.strip]
    return float(np.max(np.abs(F(pts))))


@dataclass
class BatchResult:
    tau: np.ndarray
    exit: np.ndarray
    payoff: np.ndarray
    truncated: np.ndarray


def _step_batch(x, sample, k, sI, sII, params, rng):
    """Displacements (already scaled by eps) and coin codes for one turn."""
    xi = rng.coin(sample, k)
    half, alpha = 0.5 * params.alpha, params.alpha
    code = np.where(xi < half, 1, np.where(xi < alpha, 2, 0))
    s = np.empty_like(x)
    kk = np.full(len(x), k)
    for c, strat in ((1, sI), (2, sII)):
        m = code == c
        if np.any(m):
            s[m] = strat.move_batch(x[m], kk[m])
    m = code == 0
    if np.any(m):
        s[m] = rng.ball(sample[m], k, params.n)
    return params.epsilon * s, code


def simulate_batch(x0, sI: Strategy, sII: Strategy, params: GameParams, shape: DomainShape,
                   F: Payoff, rng, samples: np.ndarray, max_steps: int) -> BatchResult:
    """Vectorised rollouts of Markov strategies; sample ``i`` uses stream ``samples[i]``."""
    if not (sI.markov and sII.markov):
        raise ValueError("bulk simulation needs Markov strategies")
    samples = np.asarray(samples, dtype=np.int64)
    B = len(samples)
    x = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (B, 1))
    if not shape.contains(x[:1])[0]:
        raise ValueError("starting point must lie in the open domain")
    tau = np.full(B, max_steps, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    alive = np.arange(B)
    for k in range(max_steps):
        if alive.size == 0:
            break
        dx, _ = _step_batch(x[alive], samples[alive], k, sI, sII, params, rng)
        x[alive] = x[alive] + dx
        out = ~shape.contains(x[alive])
        if np.any(out):
            stopped = alive[out]
            tau[stopped] = k + 1
            done[stopped] = True
            alive = alive[~out]
    payoff = np.zeros(B)
    if np.any(done):
        payoff[done] = discount_factor(params, tau[done]) * F(x[done])
    return BatchResult(tau, x, payoff, ~done)


@dataclass
class McEstimate:
    mean: float
    std_error: float
    n_samples: int
    truncation_count: int
    seed: int

    @property
    def truncation_fraction(self) -> float:
        return self.truncation_count / self.n_samples

    def to_json(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_samples": self.n_samples,
                "truncation_count": self.truncation_count,
                "truncation_fraction": self.truncation_fraction, "seed": self.seed,
                "ci95": [self.mean - 1.96 * self.std_error, self.mean + 1.96 * self.std_error]}


def _fan_out(fn, n_samples: int, threads: int):
    # per-sample streams make results independent of how samples are chunked
    size = min(_MAX_CHUNK, -(-n_samples // max(threads, 1)))
    chunks = [np.arange(a, min(a + size, n_samples)) for a in range(0, n_samples, size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def estimate_value(x0, sI: Strategy, sII: Strategy, params: GameParams, shape: DomainShape,
                   F: Payoff, n_samples: int, seed: int, *, max_steps: int | None = None,
                   threads: int = 1, return_samples: bool = False):
    """Monte Carlo estimate of ``E[(1 - gamma eps^2)^tau F(X_tau)]`` for fixed strategies.

    Sample ``i`` always uses the counter stream ``(seed, i)`` and results are
    reduced in sample order, so the estimate is independent of ``threads``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if max_steps is None:
        max_steps = truncation_horizon(params, payoff_bound(shape, params.epsilon, F))
    rng = CounterRNG(seed)
    parts = _fan_out(lambda ids: simulate_batch(x0, sI, sII, params, shape, F, rng, ids, max_steps),
                     n_samples, threads)
    payoff = np.concatenate([p.payoff for p in parts])
    truncated = np.concatenate([p.truncated for p in parts])
    se = float(payoff.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan")
    est = McEstimate(float(payoff.mean()), se, n_samples, int(truncated.sum()), int(seed))
    if return_samples:
        tau = np.concatenate([p.tau for p in parts])
        return est, payoff, tau
    return est


@dataclass
class StoppingTimeStats:
    mean: float
    variance: float
    std_error: float
    quantiles: dict[str, float]
    mean_scaled: float  # E[tau] * eps^2
    n_samples: int
    truncation_count: int
    seed: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _project_into_ball(x_old, x_new, center, radius):
    """Clip moves leaving ``B_R(center)`` at the sphere, along the move segment."""
    d = x_new - x_old
    a = np.sum(d * d, axis=-1)
    q = x_old - center
    b = 2 * np.sum(q * d, axis=-1)
    c = np.sum(q * q, axis=-1) - radius**2
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    t = np.where(a > 0, (-b + disc) / (2 * np.where(a > 0, a, 1.0)), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return x_old + t[:, None] * d


def stopping_time_stats(x0, sI: Strategy, sII: Strategy, params: GameParams, shape: DomainShape,
                        n_samples: int, seed: int, *, max_steps: int = 10**7,
                        threads: int = 1) -> StoppingTimeStats:
    """Stopping time of the auxiliary process on ``annulus(z, delta, R)``.

    The token stops once it enters the closed ball ``B_delta(z)`` and cannot
    leave the closed ball ``B_R(z)``: a move that would exit is cut where its
    segment meets the outer sphere.
    """
    if shape.kind != "annulus":
        raise ValueError("stopping-time process needs an annulus(z, delta, R)")
    z = shape.center
    delta, R = shape.params[1]
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    r0 = np.linalg.norm(x0 - z)
    if not delta < r0 < R:
        raise ValueError("need delta < |x0 - z| < R")
    if not (sI.markov and sII.markov):
        raise ValueError("bulk simulation needs Markov strategies")
    rng = CounterRNG(seed)

    def run(ids):
        B = len(ids)
        x = np.tile(x0, (B, 1))
        tau = np.full(B, max_steps, dtype=np.int64)
        alive = np.arange(B)
        for k in range(max_steps):
            if alive.size == 0:
                break
            xa = x[alive]
            dx, _ = _step_batch(xa, ids[alive], k, sI, sII, params, rng)
            new = xa + dx
            far = np.linalg.norm(new - z, axis=-1) > R
            if np.any(far):
                new[far] = _project_into_ball(xa[far], new[far], z, R)
            x[alive] = new
            hit = np.linalg.norm(new - z, axis=-1) <= delta
            tau[alive[hit]] = k + 1
            alive = alive[~hit]
        return tau, alive.size

    parts = _fan_out(lambda ids: run(ids), n_samples, threads)
    tau = np.concatenate([p[0] for p in parts]).astype(float)
    trunc = sum(p[1] for p in parts)
    qs = np.quantile(tau, [0.1, 0.25, 0.5, 0.75, 0.9])
    var = float(tau.var(ddof=1)) if n_samples > 1 else 0.0
    return StoppingTimeStats(
        mean=float(tau.mean()), variance=var, std_error=math.sqrt(var / n_samples),
        quantiles={k: float(v) for k, v in zip(["q10", "q25", "median", "q75", "q90"], qs)},
        mean_scaled=float(tau.mean() * params.epsilon**2), n_samples=n_samples,
        truncation_count=int(trunc), seed=int(seed))


@dataclass
class MartingaleStats:
    step: np.ndarray
    mean_increment: np.ndarray
    std_error: np.ndarray
    alive: np.ndarray
    eta: float
    adversary: str

    def max_excess(self) -> float:
        """``max_k (mean_k - 2 SE_k)``; nonpositive means every step passes."""
        ok = self.alive > 1
        return float(np.max(self.mean_increment[ok] - 2 * self.std_error[ok])) if np.any(ok) else -np.inf

    def to_rows(self) -> list[dict]:
        return [{"k": int(k), "mean_increment": float(m), "std_error": float(s), "alive": int(a)}
                for k, m, s, a in zip(self.step, self.mean_increment, self.std_error, self.alive)]


def supermartingale_check(u: ValueField, params: GameParams, F: Payoff, eta: float,
                          n_samples: int, horizon: int, x0, sI: Strategy, seed: int,
                          *, threads: int = 1) -> MartingaleStats:
    """Increments of ``M_k = (1-gamma eps^2)^k u(X_k) + eta 2^-(k-1)`` with Player II greedy-min.

    ``u`` is extended off the grid by :class:`FieldEvaluator` (``F`` outside the
    domain). Returns, for each ``k < horizon``, the mean and standard error of
    ``M_{k+1} - M_k`` over trajectories still running at step ``k``.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    shape = u.grid.shape
    sII = GreedyStrategy(u, "min", eta, F)
    evaluate = FieldEvaluator(u, F)
    rng = CounterRNG(seed)
    d = params.discount

    def run(ids):
        B = len(ids)
        x = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (B, 1))
        inc = np.full((horizon, B), np.nan)
        alive = np.arange(B)
        m_prev = evaluate(x) + eta * 2.0
        for k in range(horizon):
            if alive.size == 0:
                break
            dx, _ = _step_batch(x[alive], ids[alive], k, sI, sII, params, rng)
            x[alive] = x[alive] + dx
            m_new = d ** (k + 1) * evaluate(x[alive]) + eta * 2.0 ** (-k)
            inc[k, alive] = m_new - m_prev[alive]
            m_prev[alive] = m_new
            alive = alive[shape.contains(x[alive])]
        return inc

    inc = np.concatenate(_fan_out(run, n_samples, threads), axis=1)
    count = np.sum(~np.isnan(inc), axis=1)
    mean = np.array([np.nanmean(r) if c else np.nan for r, c in zip(inc, count)])
    std = np.array([np.nanstd(r, ddof=1) if c > 1 else np.nan for r, c in zip(inc, count)])
    se = std / np.sqrt(np.maximum(count, 1))
    return MartingaleStats(np.arange(horizon), mean, se, count, eta, sI.label)


def value_sandwich_margin(u: ValueField, eta: float, std_error: float, c: float | None = None) -> float:
    """``3 SE + c (eta + h)`` with ``c`` the empirical Lipschitz constant of ``u`` by default."""
    if c is None:
        c = empirical_lipschitz(u)
    return 3 * std_error + c * (eta + u.grid.h)


def empirical_lipschitz(u: ValueField) -> float:
    """Largest difference quotient of ``u`` between interior lattice neighbours along each axis.

    Strip values are excluded: the DPP solution may jump across the boundary.
    """
    grid = u.grid
    L = grid.to_lattice(np.where(grid.interior, u.values, np.nan))
    best = 0.0
    for ax in range(grid.dim):
        diff = np.abs(np.diff(L, axis=ax)) / grid.h
        if np.any(np.isfinite(diff)):
            best = max(best, float(np.nanmax(diff)))
    return best


def mirrored(rng: CounterRNG):
    """Stream with the same coins and reflected random moves (``w -> -w``)."""

    class _Mirror:
        def coin(self, sample, step):
            return rng.coin(sample, step)

        def ball(self, sample, step, n):
            return -rng.ball(sample, step, n)

    return _Mirror()


__all__ = [
    "Coin", "GameHistory", "Strategy", "ZeroStrategy", "ConstantStrategy", "PullStrategy",
    "GreedyStrategy", "FieldEvaluator", "pull_strategy", "push_strategy", "greedy_strategy",
    "GameTrajectory", "play_game", "simulate_batch", "estimate_value", "McEstimate",
    "stopping_time_stats", "StoppingTimeStats", "supermartingale_check", "MartingaleStats",
    "truncation_horizon", "payoff_bound", "empirical_lipschitz", "value_sandwich_margin", "mirrored",
]
