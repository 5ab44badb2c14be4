import numpy as np
import pytest

from tabgfn.envs import TOY_EDGES, TOY_FLOWS, make_toy_env
from tabgfn.flows import TrajectoryFlow

# lines appended by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy():
    return make_toy_env()


@pytest.fixture
def toy_edges():
    return list(TOY_EDGES)


@pytest.fixture
def toy_flow(toy):
    def make(name):
        return TrajectoryFlow.from_mapping(toy.dag, TOY_FLOWS[name])

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
