import os

import pytest
from hypothesis import HealthCheck, settings

from chainexit import builtin_model
from chainexit.montecarlo import ExitProblem

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def lin2():
    return builtin_model("lin2")


@pytest.fixture(scope="session")
def lin2_problem(lin2):
    return ExitProblem.from_model(lin2)


@pytest.fixture(scope="session")
def det_exit_problem():
    return ExitProblem.from_model(builtin_model("det-exit"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
