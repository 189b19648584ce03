import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from anatomyssl.phantom import build_corpus

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_corpus():
    """96px corpus used by fast unit tests."""
    return build_corpus(32, image_size=96, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(12, image_size=96, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
