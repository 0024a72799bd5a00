"""Experiment configurations, named scenarios and runners.

Each runner solves/simulates what its configuration asks for, writes one CSV of
records plus a JSON manifest into the output directory, and returns the list
of acceptance checks it evaluated. Outputs depend only on the configuration and
the seed; timings go to the log, never into files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial import cKDTree

from . import __version__
from . import payoff as payoffs
from .domain import DomainGrid, DomainShape, build_grid
from .dpp import GameParams, ValueField, boundary_field, limit_pde_gamma, solve_dpp
from .expansion import expansion_check, registry
from .game import (
    ConstantStrategy, Strategy, ZeroStrategy, empirical_lipschitz, estimate_value,
    greedy_strategy, payoff_bound, play_game, pull_strategy, push_strategy, stopping_time_stats,
    supermartingale_check, truncation_horizon, value_sandwich_margin,
)
from .io import save_solution, write_csv, write_json, write_jsonl
from .oracles import solve_1d, solve_radial
from .rng import CounterRNG

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("solve", "simulate", "converge", "compare", "regularity", "boundary",
               "stopping-time", "expansion")
EXACT = 1e-12
EXPANSION_FLOOR = 1e-9


class PayoffSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "affine", "cosine", "samples"] = "constant"
    value: float = 1.0
    a: list[float] | None = None
    b: float = 0.0
    k: list[float] | None = None
    amplitude: float = 1.0
    offset: float = 0.0
    path: str | None = None

    @model_validator(mode="after")
    def _complete(self):
        if self.kind == "affine" and self.a is None:
            raise ValueError("affine payoff needs coefficients 'a'")
        if self.kind == "cosine" and self.k is None:
            raise ValueError("cosine payoff needs frequencies 'k'")
        if self.kind == "samples" and self.path is None:
            raise ValueError("samples payoff needs a CSV 'path'")
        return self

    def build(self, dim: int, base: Path | None = None) -> payoffs.Payoff:
        if self.kind == "constant":
            return payoffs.constant(self.value)
        if self.kind == "affine":
            if len(self.a) != dim:
                raise ValueError("affine coefficients do not match the dimension")
            return payoffs.affine(self.a, self.b)
        if self.kind == "cosine":
            if len(self.k) != dim:
                raise ValueError("cosine frequencies do not match the dimension")
            return payoffs.cosine(self.k, self.amplitude, self.offset)
        path = Path(self.path)
        if base is not None and not path.is_absolute():
            path = base / path
        return payoffs.load_samples(path)


class StrategySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["greedy", "zero", "pull", "push", "constant"] = "greedy"
    target: list[float] | None = None
    direction: list[float] | None = None


class StoppingSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    distances: list[float] = [0.1, 0.3, 0.5]
    direction: list[float] | None = None
    adversary: StrategySpec = StrategySpec(kind="push")
    n_samples: int = Field(10_000, ge=2)
    max_steps: int = Field(10**7, ge=1)
    scaling_factor: float = 2.0


class MartingaleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    eta: float = Field(0.01, gt=0)
    horizon: int = Field(50, ge=1)
    n_samples: int = Field(100_000, ge=2)
    adversaries: list[StrategySpec] = [StrategySpec(kind="zero"), StrategySpec(kind="pull")]
    near_martingale_band: float | None = 4.0  # greedy-max Player I: |mean| <= band * SE


class ExpansionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: list[int] = [1, 2, 3]
    functions: list[str] | None = None
    point: list[float] = [0.3, -0.2, 0.1]
    max_ratio: float = 0.75


class ExperimentConfig(BaseModel):
    """Validated experiment configuration (schema version 1)."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    scenario: str | None = None
    experiment: Literal[EXPERIMENTS] | None = None  # type: ignore[valid-type]
    shape: dict[str, Any]
    p: float
    n: int
    gamma: float = Field(ge=0)
    epsilons: list[float] = Field(min_length=1)
    h_ratio: float = 8.0
    payoff: PayoffSpec = PayoffSpec()
    seed: int = 0
    mean_rule: Literal["moment", "uniform"] = "moment"
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(1_000_000, ge=1)
    points: list[list[float]] = []
    n_samples: int = Field(100_000, ge=1)
    eta: float = Field(0.0, ge=0)
    player_I: StrategySpec = StrategySpec()
    player_II: StrategySpec = StrategySpec()
    compare_epsilon: float | None = None
    adversarial_check: bool = True
    dump_trajectories: int = Field(0, ge=0)
    error_budget: float = 0.05
    regularity_radius: float = 0.5
    regularity_center: list[float] | None = None
    regularity_ratio: tuple[float, float] = (0.5, 2.0)
    oracle_slack: float = 0.1
    max_pairs: int = 10**6
    boundary_band: float = 0.5
    martingale: MartingaleSpec = MartingaleSpec()
    stopping: StoppingSpec = StoppingSpec()
    expansion: ExpansionSpec = ExpansionSpec()

    @field_validator("shape")
    @classmethod
    def _shape(cls, v):
        DomainShape.from_dict(v)
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if not self.p > 2:
            raise ValueError("p must exceed 2")
        if self.domain.dim != self.n:
            raise ValueError(f"n={self.n} does not match the {self.domain.dim}-D shape")
        if self.h_ratio < 4:
            raise ValueError("h_ratio must be at least 4 (h <= eps/4)")
        for eps in self._all_epsilons():
            if not eps > 0:
                raise ValueError("epsilons must be positive")
            if not self.gamma * eps**2 < 0.5:
                raise ValueError(f"gamma*eps^2 = {self.gamma * eps ** 2:g} >= 1/2 at eps={eps}")
        if len(set(self.epsilons)) != len(self.epsilons):
            raise ValueError("epsilons must be distinct")
        for x in self.points:
            if len(x) != self.n:
                raise ValueError("evaluation points must match the dimension")
        for d in self.expansion.dims:
            if d not in (1, 2, 3):
                raise ValueError("expansion dims must be 1, 2 or 3")
        if self.expansion.functions:
            known = set(registry(1))
            missing = set(self.expansion.functions) - known
            if missing:
                raise ValueError(f"unknown test functions {sorted(missing)}")
        if self.payoff.kind != "samples":
            self.payoff.build(self.n)
        return self

    def _all_epsilons(self) -> list[float]:
        extra = [self.compare_epsilon] if self.compare_epsilon is not None else []
        return list(self.epsilons) + extra

    @property
    def domain(self) -> DomainShape:
        return DomainShape.from_dict(self.shape)

    def params(self, epsilon: float) -> GameParams:
        return GameParams(self.p, self.n, self.gamma, epsilon)

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


SCENARIOS: dict[str, dict[str, Any]] = {
    # (p+1) * (2 gamma) / (p-1) = 1 with p = 3, gamma = 1/4
    "figure1": {
        "shape": {"kind": "interval", "a": -1.0, "b": 1.0},
        "p": 3.0, "n": 1, "gamma": 0.25,
        "epsilons": [0.1, 0.05, 0.025], "h_ratio": 8,
        "payoff": {"kind": "constant", "value": 1.0},
        "points": [[-0.75], [-0.5], [0.0], [0.25], [0.5]],
        "compare_epsilon": 0.1,
    },
    "constant": {
        "shape": {"kind": "interval", "a": -1.0, "b": 1.0},
        "p": 3.0, "n": 1, "gamma": 0.0,
        "epsilons": [0.1, 0.05], "h_ratio": 8,
        "payoff": {"kind": "constant", "value": 1.0},
        "points": [[0.0]], "n_samples": 1000,
    },
    "radial2d": {
        "shape": {"kind": "ball", "center": [0.0, 0.0], "radius": 1.0},
        "p": 4.0, "n": 2, "gamma": 0.5,
        "epsilons": [0.2, 0.1, 0.05], "h_ratio": 4,
        "payoff": {"kind": "constant", "value": 1.0},
        "points": [[0.3, 0.2]],
        "compare_epsilon": 0.2,
    },
    "annulus2d": {
        "shape": {"kind": "annulus", "center": [0.0, 0.0], "r_in": 0.25, "r_out": 1.0},
        "p": 6.0, "n": 2, "gamma": 0.0,
        "epsilons": [0.1, 0.05, 0.025], "h_ratio": 4,
        "payoff": {"kind": "constant", "value": 1.0},
        "stopping": {"distances": [0.1, 0.3, 0.5], "n_samples": 10_000},
    },
    "expansion": {
        "shape": {"kind": "interval", "a": -1.0, "b": 1.0},
        "p": 3.0, "n": 1, "gamma": 1.0,
        "epsilons": [0.2, 0.1, 0.05, 0.025],
    },
}


def resolve_config(raw: dict[str, Any]) -> ExperimentConfig:
    """Overlay ``raw`` on its named scenario (if any) and validate."""
    raw = copy.deepcopy(raw)
    name = raw.get("scenario")
    if name is not None:
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        merged = copy.deepcopy(SCENARIOS[name])
        for key, val in raw.items():
            if isinstance(val, dict) and isinstance(merged.get(key), dict) and key != "shape":
                merged[key] = {**merged[key], **val}
            else:
                merged[key] = val
        raw = merged
    return ExperimentConfig.model_validate(raw)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text())
    if seed is not None:
        raw["seed"] = seed
    return resolve_config(raw)


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


@dataclass
class RunResult:
    experiment: str
    checks: list[Check]
    files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


class Context:
    """Shared state of one run: config, payoff, output directory, provenance."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int = 1, base: Path | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))
        self.F = cfg.payoff.build(cfg.n, base)
        self.hash = cfg.config_hash()
        self.files: list[str] = []

    @property
    def provenance(self) -> dict:
        return {"version": __version__, "config_hash": self.hash, "seed": self.cfg.seed}

    def grid(self, eps: float) -> DomainGrid:
        return build_grid(self.cfg.domain, eps, eps / self.cfg.h_ratio)

    def solve(self, eps: float):
        grid = self.grid(eps)
        params = self.cfg.params(eps)
        t = time.perf_counter()
        u, rep = solve_dpp(grid, params, boundary_field(grid, self.F), self.cfg.tol,
                           self.cfg.max_iter, mean_rule=self.cfg.mean_rule, record_history=False,
                           stabilize=self.cfg.gamma == 0)
        log.info("eps=%g: %d points, %d sweeps, residual %.2e (%.2fs)",
                 eps, grid.size, rep.iterations, rep.residual, time.perf_counter() - t)
        return grid, params, u, rep

    def write_records(self, name: str, records: list[dict]) -> None:
        if not records:
            return
        keys = list(self.provenance) + [k for k in records[0] if k not in self.provenance]
        rows = ([{**self.provenance, **r}.get(k) for k in keys] for r in records)
        self.files.append(write_csv(self.out / f"{name}.csv", keys, rows).name)

    def strategy(self, spec: StrategySpec, mode: str, u: ValueField | None, eps: float) -> Strategy:
        if spec.kind == "greedy":
            if u is None:
                raise ValueError("greedy strategy needs a solved field")
            return greedy_strategy(u, mode, self.cfg.eta, self.F)
        if spec.kind == "zero":
            return ZeroStrategy()
        if spec.kind == "constant":
            return ConstantStrategy(spec.direction or [1.0] + [0.0] * (self.cfg.n - 1))
        target = spec.target if spec.target is not None else self.cfg.domain.center
        return pull_strategy(target, eps) if spec.kind == "pull" else push_strategy(target, eps)


def _strictly_decreasing(values: list[float]) -> bool:
    if all(v <= EXACT for v in values):
        return True
    return all(b < a for a, b in zip(values, values[1:]))


def _ratios_within(values: list[float], lo: float, hi: float) -> tuple[bool, list[float]]:
    ratios = []
    ok = True
    for a, b in zip(values, values[1:]):
        if a <= EXACT and b <= EXACT:
            ratios.append(1.0)
            continue
        r = b / a if a > 0 else math.inf
        ratios.append(r)
        ok &= lo <= r <= hi
    return ok, ratios


def oracle_for(cfg: ExperimentConfig, F: payoffs.Payoff):
    """Reference solution of the limit equation for the configured geometry.

    Returns ``(u, du)`` where ``du`` is the derivative in 1-D and ``None`` otherwise.
    """
    shape = cfg.domain
    g = limit_pde_gamma(cfg.gamma)
    if shape.kind == "interval":
        a, b = shape.params[0][0], shape.params[1][0]
        o = solve_1d(a, b, float(F([[a]])[0]), float(F([[b]])[0]), cfg.p, g)
        return (lambda x: o(np.asarray(x)[..., 0])), (lambda x: o.derivative(np.asarray(x)[..., 0]))
    if F.constant is None or shape.kind not in ("ball", "annulus"):
        raise ValueError("no oracle: need a 1-D interval or a ball/annulus with constant payoff")
    c = F.constant
    if shape.kind == "ball":
        o = solve_radial(cfg.p, cfg.n, g, shape.params[1][0], c)
    else:
        r_in, r_out = shape.params[1]
        o = solve_radial(cfg.p, cfg.n, g, r_out, c, r_in=r_in, inner_value=c)
    center = shape.center
    return (lambda x: o(x, center)), None


def lipschitz_quotient(u: ValueField, center, radius: float, max_pairs: int, seed: int) -> dict:
    """Max and mean of ``|u(x)-u(z)| / (||u|| (|x-z| + eps))`` over interior pairs in ``B_r``.

    All pairs are used when there are at most ``max_pairs``; otherwise
    ``max_pairs`` pairs are drawn with a seeded generator.
    """
    grid = u.grid
    pts = grid.points
    sel = grid.interior & (np.linalg.norm(pts - np.asarray(center), axis=-1) <= radius)
    x, v = pts[sel], u.values[sel]
    m = len(v)
    norm = u.sup_norm()
    if m < 2 or norm == 0:
        return {"max": 0.0, "mean": 0.0, "pairs": 0, "sampled": False}
    total = m * (m - 1) // 2
    eps = grid.epsilon
    if total <= max_pairs:
        best, acc = 0.0, 0.0
        for i in range(m - 1):
            d = np.linalg.norm(x[i + 1:] - x[i], axis=-1)
            q = np.abs(v[i + 1:] - v[i]) / (norm * (d + eps))
            best = max(best, float(q.max()))
            acc += float(q.sum())
        return {"max": best, "mean": acc / total, "pairs": total, "sampled": False}
    rng = np.random.default_rng(seed)
    i = rng.integers(0, m, max_pairs)
    j = rng.integers(0, m - 1, max_pairs)
    j = j + (j >= i)
    d = np.linalg.norm(x[i] - x[j], axis=-1)
    q = np.abs(v[i] - v[j]) / (norm * (d + eps))
    return {"max": float(q.max()), "mean": float(q.mean()), "pairs": max_pairs, "sampled": True}


def run_solve(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    records, checks = [], []
    for i, eps in enumerate(cfg.epsilons):
        grid, params, u, rep = ctx.solve(eps)
        stem = ctx.out / f"solution_{i}"
        save_solution(u, params, stem, rep, {"provenance": ctx.provenance})
        ctx.files += [stem.with_suffix(".json").name, stem.with_suffix(".csv").name]
        rec = {"epsilon": eps, "h": grid.h, "points": grid.size, "interior": int(grid.interior.sum()),
               "iterations": rep.iterations, "residual": rep.residual, "converged": rep.converged}
        records.append(rec)
        checks.append(Check(f"solve converged eps={eps:g}", rep.converged, rec))
        if cfg.gamma == 0 and ctx.F.constant is not None:
            dev = float(np.max(np.abs(u.values - ctx.F.constant)))
            checks.append(Check(f"constant payoff reproduced eps={eps:g}", dev <= EXACT,
                                {"max_deviation": dev}))
    ctx.write_records("solve", records)
    return checks


def run_converge(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    oracle, _ = oracle_for(cfg, ctx.F)
    center = cfg.regularity_center or list(cfg.domain.center)
    records = []
    for eps in cfg.epsilons:
        grid, params, u, rep = ctx.solve(eps)
        inner = grid.interior
        err = np.abs(u.values[inner] - oracle(grid.points[inner]))
        c_idx = grid.nearest_index([center])[0]
        at_center = (abs(u.values[c_idx] - float(oracle(grid.points[c_idx][None])[0]))
                     if c_idx >= 0 and grid.interior[c_idx] else math.nan)
        quot = lipschitz_quotient(u, center, cfg.regularity_radius, cfg.max_pairs, cfg.seed)
        records.append({"epsilon": eps, "h": grid.h, "iterations": rep.iterations,
                        "converged": rep.converged, "error_sup": float(err.max()),
                        "error_center": at_center, "lipschitz_quotient_max": quot["max"],
                        "lipschitz_quotient_mean": quot["mean"],
                        "lipschitz_grid": empirical_lipschitz(u)})
    ctx.write_records("converge", records)
    checks = [Check("all solves converged", all(r["converged"] for r in records))]
    for key in ("error_sup", "error_center"):
        errs = [r[key] for r in records]
        if any(math.isnan(e) for e in errs):
            continue
        checks.append(Check(f"{key} strictly decreasing", _strictly_decreasing(errs), {key: errs}))
        checks.append(Check(f"final {key} below {cfg.error_budget:g}", errs[-1] < cfg.error_budget,
                            {key: errs[-1]}))
    return checks


def run_regularity(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    center = cfg.regularity_center or list(cfg.domain.center)
    records = []
    for eps in cfg.epsilons:
        grid, params, u, rep = ctx.solve(eps)
        quot = lipschitz_quotient(u, center, cfg.regularity_radius, cfg.max_pairs, cfg.seed)
        records.append({"epsilon": eps, "h": grid.h, "converged": rep.converged,
                        "quotient_max": quot["max"], "quotient_mean": quot["mean"],
                        "pairs": quot["pairs"], "sampled": quot["sampled"]})
    maxima = [r["quotient_max"] for r in records]
    lo, hi = cfg.regularity_ratio
    ok, ratios = _ratios_within(maxima, lo, hi)
    checks = [Check("all solves converged", all(r["converged"] for r in records)),
              Check(f"quotient ratio per eps step in [{lo:g}, {hi:g}]", ok,
                    {"quotient_max": maxima, "ratios": ratios})]
    if cfg.n == 1 and cfg.domain.kind == "interval":
        oracle, du = oracle_for(cfg, ctx.F)
        c, r = center[0], cfg.regularity_radius
        xs = np.linspace(c - r, c + r, 2001)[:, None]
        a, b = cfg.domain.params[0][0], cfg.domain.params[1][0]
        sup = float(np.max(np.abs(oracle(np.linspace(a, b, 2001)[:, None]))))
        bound = float(np.max(np.abs(du(xs)))) / sup + cfg.oracle_slack if sup > 0 else cfg.oracle_slack
        for rec in records:
            rec["oracle_bound"] = bound
        checks.append(Check("quotient below oracle derivative bound", max(maxima) <= bound,
                            {"bound": bound, "quotient_max": max(maxima)}))
    ctx.write_records("regularity", records)
    return checks


def run_boundary_modulus(ctx: Context) -> list[Check]:
    """Fit ``|u(x) - u(z)| / ||F||_{C^{0,1}}`` against ``dist(x, boundary)`` near the boundary."""
    cfg = ctx.cfg
    shape = cfg.domain
    records = []
    for eps in cfg.epsilons:
        grid, params, u, rep = ctx.solve(eps)
        pts = grid.points
        d = -shape.signed_distance(pts)
        near = grid.interior & (d <= cfg.boundary_band)
        strip_idx = np.flatnonzero(grid.strip)
        y = shape.boundary_projection(pts[near])
        _, j = cKDTree(pts[strip_idx]).query(y)
        norm = ctx.F.c01_norm(pts[strip_idx])
        gap = np.abs(u.values[near] - u.values[strip_idx[j]])
        gap = gap / norm if norm > 0 else gap
        dist = d[near]
        if np.max(gap) <= EXACT:
            slope = intercept = envelope = 0.0
        else:
            A = np.stack([dist, np.ones_like(dist)], axis=1)
            (slope, intercept), *_ = np.linalg.lstsq(A, gap, rcond=None)
            envelope = float(np.max(gap - slope * dist))
        rec = {"epsilon": eps, "h": grid.h, "samples": int(near.sum()), "c01_norm": norm,
               "slope": float(slope), "intercept": float(intercept), "envelope": envelope,
               "envelope_over_eps": envelope / eps, "max_gap": float(gap.max())}
        if shape.kind == "interval" and ctx.F.constant is not None and norm > 0:
            _, du = oracle_for(cfg, ctx.F)
            b = shape.params[1][0]
            rec["oracle_slope"] = float(abs(du(np.array([[b]]))[0])) / norm
        records.append(rec)
    ctx.write_records("boundary", records)
    if all(r["max_gap"] <= EXACT for r in records):
        return [Check("boundary gap identically zero", True, {"max_gap": max(r["max_gap"] for r in records)})]
    ok_s, rs = _ratios_within([r["slope"] for r in records], 0.5, 2.0)
    ok_e, re = _ratios_within([r["envelope"] for r in records], 0.5, 2.0)
    return [Check("boundary slope stable across eps", ok_s and all(r["slope"] > 0 for r in records),
                  {"slopes": [r["slope"] for r in records], "ratios": rs}),
            Check("envelope constant stable across eps", ok_e,
                  {"envelope": [r["envelope"] for r in records], "ratios": re})]


def _mc_row(x0, est, u_val, margin) -> dict:
    row = {f"x{d}": float(v) for d, v in enumerate(x0)}
    row.update({"u_eps": u_val, "mc_mean": est.mean, "std_error": est.std_error,
                "diff": est.mean - u_val, "margin": margin,
                "truncated": est.truncation_count, "n_samples": est.n_samples})
    return row


def run_compare(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    if not cfg.points:
        raise ValueError("compare needs evaluation points")
    eps = cfg.compare_epsilon or cfg.epsilons[0]
    grid, params, u, rep = ctx.solve(eps)
    sI = greedy_strategy(u, "max", cfg.eta, ctx.F)
    sII = greedy_strategy(u, "min", cfg.eta, ctx.F)
    L = empirical_lipschitz(u)
    records, checks = [], [Check("solve converged", rep.converged)]
    for x0 in cfg.points:
        i = grid.nearest_index([x0])[0]
        if i < 0 or not grid.interior[i]:
            raise ValueError(f"point {x0} is not an interior grid point")
        x = grid.points[i]
        t = time.perf_counter()
        est = estimate_value(x, sI, sII, params, grid.shape, ctx.F, cfg.n_samples, cfg.seed,
                             threads=ctx.threads)
        log.info("MC at %s: %.6f +- %.1e (%.1fs)", x, est.mean, est.std_error, time.perf_counter() - t)
        margin = value_sandwich_margin(u, cfg.eta, est.std_error, L)
        row = _mc_row(x, est, float(u.values[i]), margin)
        row.update({"epsilon": eps, "h": grid.h, "lipschitz": L})
        records.append(row)
        checks.append(Check(f"game value matches DPP at {list(map(float, x))}",
                            abs(row["diff"]) <= margin + EXACT, {"diff": row["diff"], "margin": margin}))
    strip_vals = ctx.F(grid.points[grid.strip])
    if cfg.adversarial_check and np.all(strip_vals >= 0):
        x = grid.points[grid.nearest_index([cfg.points[0]])[0]]
        base = records[0]
        est = estimate_value(x, sI, ZeroStrategy(), params, grid.shape, ctx.F, cfg.n_samples,
                             cfg.seed, threads=ctx.threads)
        noise = 3 * math.hypot(est.std_error, base["std_error"])
        checks.append(Check("zero Player II does not lower the value",
                            est.mean >= base["mc_mean"] - noise,
                            {"zero_strategy": est.mean, "greedy": base["mc_mean"], "noise": noise}))
        row = _mc_row(x, est, base["u_eps"], math.nan)
        row.update({"epsilon": eps, "h": grid.h, "lipschitz": L})
        records.append({**row, "player_II": "zero"})
    for r in records:
        r.setdefault("player_II", "greedy-min")
    ctx.write_records("compare", records)
    return checks


def run_simulate(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    if not cfg.points:
        raise ValueError("simulate needs evaluation points")
    eps = cfg.compare_epsilon or cfg.epsilons[0]
    needs_field = "greedy" in (cfg.player_I.kind, cfg.player_II.kind) or cfg.martingale.enabled
    u = grid = None
    checks = []
    if needs_field:
        grid, params, u, rep = ctx.solve(eps)
        checks.append(Check("solve converged", rep.converged))
    params = cfg.params(eps)
    shape = cfg.domain
    sI = ctx.strategy(cfg.player_I, "max", u, eps)
    sII = ctx.strategy(cfg.player_II, "min", u, eps)
    records = []
    for x0 in cfg.points:
        est = estimate_value(x0, sI, sII, params, shape, ctx.F, cfg.n_samples, cfg.seed,
                             threads=ctx.threads)
        row = {f"x{d}": float(v) for d, v in enumerate(x0)}
        row.update({"epsilon": eps, "player_I": sI.label, "player_II": sII.label, **est.to_json()})
        lo, hi = row.pop("ci95")
        row.update({"ci95_low": lo, "ci95_high": hi})
        records.append(row)
    ctx.write_records("simulate", records)
    if cfg.dump_trajectories:
        rng = CounterRNG(cfg.seed)
        K = truncation_horizon(params, payoff_bound(shape, eps, ctx.F))
        trajs = [play_game(cfg.points[0], sI, sII, params, shape, ctx.F, rng.stream(i), K).to_json()
                 for i in range(cfg.dump_trajectories)]
        steps = [float(np.max(np.linalg.norm(np.diff(np.array(t["positions"]), axis=0), axis=-1)))
                 for t in trajs]
        checks.append(Check("every step has length <= eps", max(steps) <= eps * (1 + 1e-12),
                            {"max_step": max(steps)}))
        ctx.files.append(write_jsonl(ctx.out / "trajectories.jsonl", trajs).name)
    if cfg.martingale.enabled:
        m = cfg.martingale
        rows = []
        for spec in m.adversaries:
            adv = ctx.strategy(spec, "max", u, eps)
            stats = supermartingale_check(u, params, ctx.F, m.eta, m.n_samples, m.horizon,
                                          cfg.points[0], adv, cfg.seed, threads=ctx.threads)
            excess = stats.max_excess()
            checks.append(Check(f"supermartingale increments <= 2 SE vs {adv.label}", excess <= EXACT,
                                {"max_mean_minus_2se": excess}))
            rows += [{"player_I": adv.label, **r} for r in stats.to_rows()]
        if m.near_martingale_band is not None:
            adv = greedy_strategy(u, "max", cfg.eta, ctx.F)
            stats = supermartingale_check(u, params, ctx.F, m.eta, m.n_samples, m.horizon,
                                          cfg.points[0], adv, cfg.seed, threads=ctx.threads)
            ok = stats.alive > 1
            # remove the deterministic -eta 2^-k drift of the slack term
            drift = m.eta * 2.0 ** -stats.step[ok].astype(float)
            z = np.abs(stats.mean_increment[ok] + drift) / np.maximum(stats.std_error[ok], EXACT)
            band = float(z.max()) if z.size else 0.0
            checks.append(Check(f"near-martingale vs greedy-max within {m.near_martingale_band:g} SE",
                                band <= m.near_martingale_band, {"max_abs_mean_over_se": band}))
            rows += [{"player_I": adv.label, **r} for r in stats.to_rows()]
        ctx.write_records("martingale", rows)
    return checks


def run_stopping_time(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    shape = cfg.domain
    if shape.kind != "annulus":
        raise ValueError("stopping-time experiment needs an annulus shape")
    st = cfg.stopping
    z = shape.center
    r_in = shape.params[1][0]
    e = np.asarray(st.direction or [1.0] + [0.0] * (cfg.n - 1), dtype=float)
    e = e / np.linalg.norm(e)
    records = []
    for eps in cfg.epsilons:
        params = cfg.params(eps)
        sI = pull_strategy(z, eps)
        adv = st.adversary
        if adv.kind in ("pull", "push") and adv.target is None:
            adv = adv.model_copy(update={"target": list(z)})
        sII = ctx.strategy(adv, "min", None, eps)
        for dist in st.distances:
            x0 = z + (r_in + dist) * e
            s = stopping_time_stats(x0, sI, sII, params, shape, st.n_samples, cfg.seed,
                                    max_steps=st.max_steps, threads=ctx.threads)
            rec = {"epsilon": eps, "distance": dist, "player_II": sII.label, "mean": s.mean,
                   "variance": s.variance, "std_error": s.std_error, "mean_scaled": s.mean_scaled,
                   **s.quantiles, "truncated": s.truncation_count, "n_samples": s.n_samples}
            records.append(rec)
    fits = []
    for eps in cfg.epsilons:
        rows = [r for r in records if r["epsilon"] == eps]
        d = np.array([r["distance"] for r in rows])
        y = np.array([r["mean_scaled"] for r in rows])
        if len(d) >= 2:
            slope, intercept = np.polyfit(d, y, 1)
            pred = slope * d + intercept
            ss = float(np.sum((y - y.mean()) ** 2))
            r2 = 1 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
        else:
            slope = intercept = r2 = math.nan
        fits.append({"epsilon": eps, "slope": float(slope), "intercept": float(intercept), "r2": r2})
    ctx.write_records("stopping_time", records)
    ctx.write_records("stopping_time_fit", fits)
    checks = [Check("no truncated stopping times", all(r["truncated"] == 0 for r in records))]
    for dist in st.distances:
        vals = [r["mean_scaled"] for r in records if r["distance"] == dist]
        spread = max(vals) / min(vals) if min(vals) > 0 else math.inf
        checks.append(Check(f"E[tau] eps^2 within factor {st.scaling_factor:g} at distance {dist:g}",
                            spread <= st.scaling_factor, {"mean_scaled": vals, "spread": spread}))
    slopes = [f["slope"] for f in fits]
    if len(st.distances) >= 2:
        ok, ratios = _ratios_within(slopes, 0.5, 2.0)
        checks.append(Check("linear growth in distance with stable slope",
                            ok and all(np.isfinite(slopes)),
                            {"slopes": slopes, "ratios": ratios, "r2": [f["r2"] for f in fits]}))
    return checks


def run_expansion(ctx: Context) -> list[Check]:
    cfg = ctx.cfg
    ex = cfg.expansion
    eps_list = sorted(cfg.epsilons, reverse=True)
    records, checks = [], []
    for dim in ex.dims:
        x = np.asarray(ex.point[:dim] if len(ex.point) >= dim else ex.point + [0.0] * dim)[:dim]
        for name, phi in registry(dim).items():
            if ex.functions and name not in ex.functions:
                continue
            if np.linalg.norm(phi.grad(x[None])[0]) < 1e-8:
                continue
            errs = []
            for eps in eps_list:
                lhs, rhs = expansion_check(phi, x, GameParams(cfg.p, dim, cfg.gamma, eps))
                errs.append(abs(lhs - rhs))
                records.append({"dim": dim, "function": name, "quadratic": phi.quadratic,
                                "epsilon": eps, "lhs": lhs, "rhs": rhs, "error": abs(lhs - rhs)})
            ratios, ok = [], True
            for a, b in zip(errs, errs[1:]):
                if b <= EXPANSION_FLOOR:
                    ratios.append(0.0)
                    continue
                r = b / a
                ratios.append(r)
                ok &= r <= ex.max_ratio
            checks.append(Check(f"expansion error shrinks dim={dim} {name}", ok,
                                {"errors": errs, "ratios": ratios}))
    ctx.write_records("expansion", records)
    return checks


RUNNERS = {
    "solve": run_solve,
    "simulate": run_simulate,
    "converge": run_converge,
    "compare": run_compare,
    "regularity": run_regularity,
    "boundary": run_boundary_modulus,
    "stopping-time": run_stopping_time,
    "expansion": run_expansion,
}


def run_experiment(kind: str, cfg: ExperimentConfig, out, threads: int = 1,
                   base: Path | None = None) -> RunResult:
    """Run one experiment and write its CSV files and ``manifest.json`` into ``out``."""
    if kind not in RUNNERS:
        raise ValueError(f"unknown experiment {kind!r}")
    if cfg.experiment is not None and cfg.experiment != kind:
        raise ValueError(f"config is for {cfg.experiment!r}, not {kind!r}")
    ctx = Context(cfg, out, threads, base)
    t = time.perf_counter()
    checks = RUNNERS[kind](ctx)
    log.info("%s finished in %.1fs", kind, time.perf_counter() - t)
    result = RunResult(kind, checks, list(ctx.files))
    manifest = {**ctx.provenance, "tool": "towgame", "schema_version": SCHEMA_VERSION,
                "experiment": kind, "config": cfg.canonical(), "outputs": sorted(ctx.files),
                "checks": [c.to_json() for c in checks], "passed": result.passed}
    write_json(ctx.out / "manifest.json", manifest)
    return result
