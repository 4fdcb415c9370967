import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from apsope import LogDataset, ContextMatrix

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(X, actions, rewards, m=None, **kw):
    actions = np.asarray(actions)
    return LogDataset(ContextMatrix(np.asarray(X, dtype=float)), actions, np.asarray(rewards, dtype=float), int(m or actions.max()), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
