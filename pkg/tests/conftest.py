import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rootsim import heap  # noqa: E402


@pytest.fixture
def rt():
    return heap.runtime_new(1024)


@pytest.fixture
def trt():
    """Torture + defensive runtime."""
    return heap.runtime_new(1024, torture=True, defensive=True)


@pytest.fixture
def make_rt():
    def make(words=1024, torture=False, defensive=False):
        return heap.runtime_new(words, torture=torture, defensive=defensive)

    return make


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # lets fixtures see whether the test body passed
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
