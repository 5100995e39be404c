import sys
from pathlib import Path

import numpy as np
import pytest

# flat module layout: make the repository root importable
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end registration tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end registration runs (minutes, needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
