import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from towgame.domain import DomainShape, build_grid
from towgame.dpp import GameParams, boundary_field, solve_dpp

settings.register_profile("towgame", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("towgame")


def ones(x):
    return np.ones(len(x))


@pytest.fixture(scope="session")
def figure1_field():
    """Solved 1-D field: p=3, gamma=1/4, F=1 on (-1, 1), eps=0.1, h=eps/8."""
    grid = build_grid(DomainShape.interval(-1, 1), 0.1, 0.1 / 8)
    params = GameParams(3, 1, 0.25, 0.1)
    u, rep = solve_dpp(grid, params, boundary_field(grid, ones))
    return grid, params, u, rep


@pytest.fixture(scope="session")
def disc_field():
    """Solved 2-D field on the unit disc: p=4, gamma=1/2, F=1, eps=0.2, h=eps/4."""
    grid = build_grid(DomainShape.ball([0, 0], 1.0), 0.2, 0.05)
    params = GameParams(4, 2, 0.5, 0.2)
    u, rep = solve_dpp(grid, params, boundary_field(grid, ones))
    return grid, params, u, rep


@pytest.fixture(autouse=True)
def _quiet_gamma_zero():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="gamma = 0", category=RuntimeWarning)
        yield


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """``record(n, ok, text)`` stores the one-line verdict for acceptance criterion ``n``."""

    def _record(n: int, ok: bool, text: str) -> bool:
        ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {text}"
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
