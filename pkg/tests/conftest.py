import numpy as np
import pytest

from helpers import make_backgrounds, make_library


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260810)


@pytest.fixture
def small_library(rng):
    return make_library(rng, n_foregrounds=6, categories=2)


@pytest.fixture
def small_backgrounds(rng):
    return make_backgrounds(rng, count=4, width=96, height=96)
