import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cos2phi import TABLE_I_CIRCUIT, TABLE_I_EFFECTIVE, BiasPoint, Truncation, solve

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def eff():
    return TABLE_I_EFFECTIVE


@pytest.fixture(scope="session")
def circ():
    return TABLE_I_CIRCUIT


@pytest.fixture(scope="session")
def one_mode_sweet(eff):
    return solve("one-mode", eff, BiasPoint(math.pi, 0.0), k=8, truncation=Truncation(16))


@pytest.fixture(scope="session")
def three_mode_sweet(circ):
    return solve("three-mode", circ, BiasPoint(math.pi, 0.0), k=8, truncation=Truncation(10, 14))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
