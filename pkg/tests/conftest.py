import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def three_arc():
    from karma_pricing.network import NetworkConfig

    return NetworkConfig((1.0, 1.5, 1.5), (0.5, 0.5, 0.9))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
