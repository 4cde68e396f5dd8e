import numpy as np
import pytest

from proxsurv.censoring import fit_censoring
from proxsurv.simulation import DgpParams, sample_dgp


@pytest.fixture(scope="session")
def dgp():
    return DgpParams()


@pytest.fixture(scope="session")
def sim2000(dgp):
    data, _ = sample_dgp(dgp, 2000, np.random.default_rng(20240))
    return data


@pytest.fixture(scope="session")
def censoring2000(sim2000):
    return fit_censoring(sim2000)


@pytest.fixture(scope="session")
def sim_large(dgp):
    data, u = sample_dgp(dgp, 100_000, np.random.default_rng(7))
    return data, u


@pytest.fixture(scope="session")
def study():
    """Memoized ``run_study`` so expensive B=200 scenarios run once per session."""
    from proxsurv.simulation import run_study

    cache = {}

    def run(scenario):
        if scenario not in cache:
            cache[scenario] = run_study(scenario)
        return cache[scenario]

    return run


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
