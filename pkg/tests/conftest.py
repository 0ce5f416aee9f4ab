import sys

import numpy as np
import pytest

from subharnack.frames import euclidean, grushin, heisenberg
from subharnack.geometry import cc_distance_field
from subharnack.grid import Grid
from subharnack.solver import Problem, identity_coefficients, solve


def bump(points, center, radius):
    """Smooth compactly supported bump exp(-1/(1-s^2)) with s = |x - c| / radius."""
    s2 = np.sum((points - center) ** 2, axis=1) / radius ** 2
    out = np.zeros(points.shape[0])
    inside = s2 < 1
    out[inside] = np.exp(-1.0 / (1.0 - s2[inside]))
    return out


@pytest.fixture(scope="session")
def frames():
    return {"euclidean": euclidean(2), "heisenberg": heisenberg(), "grushin": grushin()}


@pytest.fixture(scope="session")
def heisenberg_ball_field():
    """Fine Heisenberg distance field around the origin, flattened in z."""
    g = Grid((-0.5, -0.5, -0.03), (0.5, 0.5, 0.03), (81, 81, 121))
    return cc_distance_field(heisenberg(), g, (40, 40, 60), horizon=0.45)


@pytest.fixture(scope="session")
def heisenberg_cube_field():
    g = Grid((-0.5, -0.5, -0.1), (0.5, 0.5, 0.1), (41, 41, 41))
    return cc_distance_field(heisenberg(), g, (20, 20, 20), horizon=0.8)


@pytest.fixture(scope="session")
def euclid_disk_field():
    g = Grid((-1, -1), (1, 1), (129, 129))
    return cc_distance_field(euclidean(2), g, (64, 64), horizon=0.9)


@pytest.fixture(scope="session")
def heat65():
    """Euclidean heat solution on 65^2 with Gaussian data and its distance field."""
    g = Grid((-1, -1), (1, 1), (65, 65))
    u = solve(Problem(euclidean(2), g, identity_coefficients(2),
                      lambda P: 1 + np.exp(-4 * np.sum((P - 0.1) ** 2, axis=1)), 0.1))
    d = cc_distance_field(euclidean(2), g, (32, 32), horizon=0.8)
    return u, d


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
