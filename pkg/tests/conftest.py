from __future__ import annotations

import numpy as np
import pytest

from subrift.models import euclidean, heisenberg, hyperbolic2, sphere2
from subrift.shooting import solution_from_covector, solve_geodesic


def equator(L: float, model=None):
    """Unit-speed-times-L geodesic along the equator |x| = 1 of the stereographic sphere."""
    return solution_from_covector(model or sphere2(), [1.0, 0.0], [0.0, L])


def hyperbolic_line(L: float):
    """Geodesic of length L through the disk centre along the first axis."""
    return solution_from_covector(hyperbolic2(), [0.0, 0.0], [2.0 * L, 0.0])


@pytest.fixture(scope="session")
def euc2_sol():
    return solve_geodesic(euclidean(2), np.zeros(2), np.array([1.0, 0.5]))


@pytest.fixture(scope="session")
def heis_straight():
    return solve_geodesic(heisenberg(), np.zeros(3), np.array([1.0, 0.0, 0.0]))


@pytest.fixture(scope="session")
def heis_curved():
    return solve_geodesic(heisenberg(), np.zeros(3), np.array([1.0, 0.3, 0.1]))


@pytest.fixture(scope="session")
def sphere_L2():
    return equator(2.0)


@pytest.fixture(scope="session")
def sphere_L1():
    return equator(1.0)


@pytest.fixture(scope="session")
def sphere_off():
    """Off-equator sphere geodesic; length 1.1."""
    return solution_from_covector(sphere2(), [0.3, 0.1], [0.0, 2.0])


@pytest.fixture(scope="session")
def hyper_L1():
    return hyperbolic_line(1.0)


# ------------------------------------------------------------ acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
