import time

import numpy as np
import pytest

ACCEPTANCE_MODULE = "test_acceptance.py"


def pytest_sessionstart(session):
    session.config.gpdyn_t0 = time.perf_counter()
    session.config.gpdyn_acceptance = []


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so that its runtime check sees the whole suite
    items.sort(key=lambda item: item.path.name == ACCEPTANCE_MODULE)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "gpdyn_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
