import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sfamss.crypto import TestBackend
from sfamss.deployment import Deployment
from sfamss.protocol import ManualClock
from sfamss.scenario import DEFAULT_START_MS, Lab


@pytest.fixture
def backend():
    return TestBackend(seed=1234)


@pytest.fixture
def deployment(tmp_path):
    return Deployment.init(tmp_path / "dep", seed=5, backend="test", durable=False)


@pytest.fixture
def clock():
    return ManualClock(DEFAULT_START_MS)


@pytest.fixture
def lab(deployment, clock):
    with Lab(deployment, clock) as lab:
        yield lab


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
