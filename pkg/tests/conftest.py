import numpy as np
import pytest

from lib.diffusion.physical_layer import KernelSeriesConfig
from lib.dvae.action_layer import build_tiny_model

SEED = 20240611


@pytest.fixture
def generate_rng():
    return np.random.default_rng(SEED)


@pytest.fixture(scope="session")
def kernel_config():
    return KernelSeriesConfig.covering(1e-4, 100.0)


@pytest.fixture(scope="session")
def tiny_model_factory():
    return build_tiny_model
