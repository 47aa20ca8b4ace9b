import numpy as np
import pytest
import torch

from retalk.config import toy_config
from retalk.providers import default_registry
from retalk.toydata import make_toy_sample
from retalk.training import prepare_clip

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_sample():
    return make_toy_sample(11, seconds=2.0)


@pytest.fixture(scope="session")
def prepared(toy_sample):
    return prepare_clip(toy_sample)


@pytest.fixture(scope="session")
def registry():
    return default_registry(0)


@pytest.fixture()
def toy_cfg():
    return toy_config(0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
