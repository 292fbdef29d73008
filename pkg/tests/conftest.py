import numpy as np
import pytest

from jpave.Enums import Variant
from jpave.Training import toy_problem


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def toy_gen():
    return toy_problem(Variant.GEN, seed=3)


@pytest.fixture
def toy_cls():
    return toy_problem(Variant.CLS, seed=3)
