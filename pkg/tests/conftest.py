import numpy as np
import pytest

from deformreg.gradcheck import smooth_random_field, smooth_random_volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_pair(rng):
    return smooth_random_volume(rng, (9, 9, 9)), smooth_random_volume(rng, (9, 9, 9))


@pytest.fixture
def small_field(rng):
    return smooth_random_field(rng, (9, 9, 9), amplitude=1.2)
