"""
Shared fixtures: seeded generators and small reference measures
"""
import os

import numpy as np
import pytest

from skembed.measures import DiscreteMeasure


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def binomial4():
    return DiscreteMeasure.from_atoms([(-4, 1 / 16), (-2, 4 / 16), (0, 6 / 16), (2, 4 / 16), (4, 1 / 16)])


@pytest.fixture
def symmetric_pair():
    return DiscreteMeasure.from_atoms([(-1, 0.5), (1, 0.5)])


@pytest.fixture
def data_dir():
    return os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data')
