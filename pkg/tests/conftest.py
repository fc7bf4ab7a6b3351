import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moment_fields.core import Camera, look_at

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_camera():
    """40x36 camera looking at the origin from -y, slightly above."""
    return Camera.centered(40, 36, 40.0, look_at([0.0, -3.0, 0.5], [0.0, 0.0, 0.0]),
                           z_near=0.1, z_far=10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  "
                                    f"{detail}")
