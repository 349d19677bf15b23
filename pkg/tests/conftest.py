import numpy as np
import pytest

from muse.experiments import ModelCache

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def model_cache(tmp_path_factory):
    return ModelCache(tmp_path_factory.mktemp("models"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
