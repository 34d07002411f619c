import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from omoe import tensor

settings.register_profile("omoe", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("omoe")


@pytest.fixture(autouse=True)
def _double_precision():
    # every test starts in double precision regardless of OMOE_PRECISION
    with tensor.precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = {
    "name": "tiny",
    "backbone": {"n_layers": 3, "d_model": 16, "n_heads": 2, "max_seq": 16},
    "injection": {"targets": ["Q", "V"]},
    "adapter": {"rank": 4, "alpha": 8},
    "tasks": {"rules": ["contains", "first_low"], "n_train": 48, "n_test": 24},
    "train": {"epochs": 1},
}


@pytest.fixture
def tiny_config():
    import copy
    return copy.deepcopy(TINY_CONFIG)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
