import numpy as np
import pytest

from detrack.config import ModelConfig
from detrack.model import Tracker
from detrack.selftest import TINY_MODEL, tiny_batch


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_model(tiny_config) -> Tracker:
    return Tracker(tiny_config, seed=0)


@pytest.fixture
def tiny_pair(tiny_config):
    return tiny_batch(tiny_config, batch_size=2, seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
