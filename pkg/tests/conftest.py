from __future__ import annotations

import numpy as np
import pytest

from nlbalance.lattice import Lattice, fixed_builder
from nlbalance.measures import DiscreteMeasure
from nlbalance.problem import BalanceProblem, Box


def zero_velocity(t, X, m):
    return np.zeros_like(np.asarray(X, float))


def constant_growth(rate):
    def growth(t, X, m):
        return np.full(len(X), float(rate))
    return growth


def static_problem(name="static", growth_rate=0.0, T=1.0, box=((0.0,), (1.0,)), initial=None):
    """Problem with f = 0 and a constant growth rate, for hand-built lattices."""
    lower, upper = box
    initial = initial if initial is not None else DiscreteMeasure.dirac(list(lower))
    return BalanceProblem(name, T, initial, Box(lower, upper), zero_velocity, constant_growth(growth_rate),
                          0.0, abs(growth_rate), 0.0, 0.0, depends_on_measure=False)


@pytest.fixture
def two_state():
    """States a = 0 and b = 1 with a -> b at rate 1 and b absorbing."""
    problem = static_problem("two_state")
    lattice = Lattice([[0.0], [1.0]])
    Q = np.array([[-1.0, 1.0], [0.0, 0.0]])
    return problem, lattice, fixed_builder(Q)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_measure(rng, d, max_atoms=8, scale=2.0, max_weight=2.0):
    n = int(rng.integers(0, max_atoms + 1))
    return DiscreteMeasure(rng.normal(size=(n, d)) * scale, rng.random(n) * max_weight)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
