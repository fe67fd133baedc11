import numpy as np
import pytest

from rsuguard.eval_harness.trajgen import random_trip, straight
from rsuguard.state_estimation import EkfConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ekf_cfg():
    return EkfConfig()


@pytest.fixture(scope="session")
def straight_trip():
    return straight(120.0, 15.0, heading=0.3)


@pytest.fixture(scope="session")
def curved_trip():
    return random_trip(np.random.default_rng(3), 150.0, curved=True)


@pytest.fixture(scope="session")
def small_cfg():
    from rsuguard.eval_harness import default_config

    return (default_config()
            .override("trajectories", synthetic_count=3, min_duration=60.0, max_duration=120.0)
            .override("training", synthetic_count=6)
            .override("harness", repetitions=1))


@pytest.fixture(scope="session")
def small_forest(small_cfg):
    from rsuguard.eval_harness import train_forest

    return train_forest(small_cfg)


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and echo it immediately."""
    config = request.config
    reporter = config.pluginmanager.getplugin("terminalreporter")

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        config._criteria.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return emit
