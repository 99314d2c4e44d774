import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from esfd.euler import primitive_to_conservative

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def random_states(rng, n, dim=1, rho=(0.2, 5.0), speed=3.0, p=(0.2, 5.0)):
    r = rng.uniform(*rho, size=n)
    vel = rng.uniform(-speed, speed, size=(n, dim))
    pr = rng.uniform(*p, size=n)
    return primitive_to_conservative(r, vel, pr)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
