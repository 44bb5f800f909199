import numpy as np
import pytest

from mfsde.sde_solver import TimeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def grid100():
    return TimeGrid(1.0, 100)
