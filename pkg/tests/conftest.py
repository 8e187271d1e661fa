import numpy as np
import pytest

from stqmle.model import DependenceParams, ModelParams, PanelData
from stqmle.simulate import make_grid_weights


def random_feasible_theta(w, rng, shrink=0.95):
    """Uniform draw from the feasibility polytope by rejection, scaled toward 0."""
    lo = np.array([1.0 / w.d_min, -1.0, 1.0 / w.d_min]) if w.d_min < 0 else np.array([-1.0, -1.0, -1.0])
    hi = np.array([1.0 / w.d_max, 1.0, 1.0 / w.d_max])
    from stqmle.model import feasibility_check

    for _ in range(100000):
        t = DependenceParams.from_array(shrink * rng.uniform(lo, hi))
        if feasibility_check(w, t):
            return t
    raise RuntimeError("could not draw a feasible theta")


def random_panel(N, T, k, rng):
    X = rng.standard_normal((N, k, T))
    X[:, 0, :] = 1.0
    Y = rng.standard_normal((N, T))
    return PanelData(Y, X)


def random_params(k, theta, rng):
    return ModelParams(rng.standard_normal(k), theta, float(rng.uniform(0.5, 2.0)))


@pytest.fixture(scope="session")
def grid3():
    return make_grid_weights(3)


@pytest.fixture(scope="session")
def grid5():
    return make_grid_weights(5)


@pytest.fixture(scope="session")
def grid10():
    return make_grid_weights(10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines, printed after the run so they survive output capture
ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
