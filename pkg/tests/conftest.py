import numpy as np
import pytest

from distill_lab.prior import ConditionalPrior, MixtureComponent, OracleModel, single_gaussian, two_condition_2d
from distill_lab.schedule import build_schedule

# acceptance results, filled by tests/test_acceptance.py and printed at session end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sched():
    return build_schedule("ddpm-linear", 1000)


@pytest.fixture(scope="session")
def lin100():
    # alpha_bar[t] = 1 - t/100, handy for exact textbook values
    return build_schedule("linear-alpha-bar", 100)


@pytest.fixture(scope="session")
def two_cond():
    return two_condition_2d()


@pytest.fixture(scope="session")
def delta_prior():
    return single_gaussian((1.0, -0.5), 0.0)


@pytest.fixture(scope="session")
def mixture():
    return ConditionalPrior({"y": [MixtureComponent((2.0, 0.0), 0.1, 0.5),
                                   MixtureComponent((-2.0, 0.0), 0.1, 0.5)]})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oracle(sched, two_cond):
    return OracleModel(two_cond, sched)
