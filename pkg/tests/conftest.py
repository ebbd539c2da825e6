import numpy as np
import pytest

from subgoal_drive.sim import SimConfig, make_world
from subgoal_drive.town import generate_town, random_route


@pytest.fixture(scope="session")
def town():
    return generate_town(1)


@pytest.fixture(scope="session")
def eval_town():
    return generate_town(2)


@pytest.fixture(scope="session")
def route(town):
    _, pts = random_route(town, np.random.default_rng(3), 150.0)
    return pts


@pytest.fixture
def world(town, route):
    return make_world(town, route, SimConfig(), (), 5.0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
