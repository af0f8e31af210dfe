import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opa3d.datakit import generate_dataset, generate_scene

settings.register_profile("opa", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("opa")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return generate_scene(np.random.default_rng(7), scene_id="fixture")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(8, 3, prefix="s")
