import numpy as np
import pytest

from sparselqr.model import CostSpec, Plant


def random_spd(rng, n, floor=0.5):
    G = rng.standard_normal((n, n))
    return G @ G.T / n + floor * np.eye(n)


def random_hurwitz(rng, n, margin=0.5):
    A = rng.standard_normal((n, n))
    shift = np.linalg.eigvals(A).real.max() + margin
    return A - shift * np.eye(n)


def random_problem(rng, n, m, lam=0.0):
    """Stable open loop, generic weights (R is not a multiple of I)."""
    plant = Plant(random_hurwitz(rng, n), rng.standard_normal((n, m)), random_spd(rng, n))
    cost = CostSpec(random_spd(rng, n), random_spd(rng, m), np.full((m, n), float(lam)))
    return plant, cost


def scalar_problem(a=-1.0, b=1.0, q=1.0, r=1.0, w=1.0, lam=0.0):
    M = lambda x: np.array([[float(x)]])  # noqa: E731
    return Plant(M(a), M(b), M(w)), CostSpec(M(q), M(r), M(lam))


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
