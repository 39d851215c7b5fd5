"""
Shared fixtures: small synthetic instances drawn from the kriging model itself.
"""

import numpy as np
import pytest

from src.kriging.corr import CorrParams, Design
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec
from src.kriging.synthetic import TruthSpec, generate, latin_hypercube, sample_profiles


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def small_design():
    return latin_hypercube(8, 2, seed=3)


@pytest.fixture
def small_params():
    return CorrParams(alphas=np.array([2.0, 3.0]), beta=2.0, d=1, nugget=0.0)


@pytest.fixture
def regular_dataset(small_design, small_params):
    """8 runs on 6 equally spaced abscissae, zero-mean truth."""
    grid = np.linspace(0.0, 1.0, 6)
    basis = BasisSpec.for_grid(grid)
    Y = sample_profiles(small_design, grid, basis, np.zeros(1), 1.0, small_params, np.random.default_rng(11))
    return FunctionalDataset.from_matrix(small_design, grid, Y)


@pytest.fixture
def truncated_data():
    """12 runs on 10 abscissae with the tails of most runs cut away."""
    spec = TruthSpec(n=12, m=10, p=2, alphas=(3.0, 3.0), beta=2.0, keep_range=(0.5, 0.9))
    return generate(spec, seed=5)


@pytest.fixture
def line_design():
    """Three settings of one continuous variable on [0, 1]."""
    return Design.from_array(np.array([[0.0], [0.5], [1.0]]))
