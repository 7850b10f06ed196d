import logging

import pytest

from helpers import BROWARD_CSV, have_broward


@pytest.fixture(autouse=True)
def _quiet_optimizer_warnings():
    logging.getLogger("fairthresh").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def broward_path():
    if not have_broward():
        pytest.skip(f"Broward extract not found at {BROWARD_CSV} (set FAIRTHRESH_BROWARD_CSV)")
    return BROWARD_CSV


@pytest.fixture(scope="session")
def broward(broward_path):
    from fairthresh.data import load_broward

    return load_broward(broward_path)[0]
