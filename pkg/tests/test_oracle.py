"""
Tests for the dense reference: size caps and agreement with the Kronecker fit.
"""

import numpy as np
import pytest

from config.settings import settings
from src.kriging.corr import CorrParams
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, FitOptions, fit_regular
from src.kriging.oracle import dense_conditional_mean, dense_fit, dense_neg_loglik
from src.kriging.synthetic import latin_hypercube
from src.utils.errors import SizeCapExceeded


def _zeros(n, m):
    design = latin_hypercube(n, 2, seed=1)
    grid = np.linspace(0.0, 1.0, m)
    return FunctionalDataset.from_matrix(design, grid, np.zeros((n, m))), BasisSpec.for_grid(grid)


class TestCaps:

    def test_dense_fit_cap(self, small_params):
        dataset, basis = _zeros(20, settings.dense_fit_cap // 20 + 1)
        with pytest.raises(SizeCapExceeded):
            dense_fit(dataset, basis, small_params)

    def test_conditional_cap(self, small_params):
        dataset, basis = _zeros(20, settings.dense_conditional_cap // 20 + 1)
        with pytest.raises(SizeCapExceeded):
            dense_conditional_mean(dataset, np.zeros(1), 1.0, small_params, basis)

    def test_likelihood_cap(self, small_params):
        dataset, basis = _zeros(4, 4)
        with pytest.raises(SizeCapExceeded):
            dense_neg_loglik(dataset, basis, small_params, cap=15)

    def test_complete_data_has_nothing_to_condition(self, small_params):
        dataset, basis = _zeros(3, 3)
        mean, cov, missing = dense_conditional_mean(dataset, np.zeros(1), 1.0, small_params, basis)
        assert mean.size == 0 and cov.shape == (0, 0) and missing.size == 0


class TestAgreement:

    def test_dense_objective_at_the_kronecker_optimum(self, regular_dataset):
        basis = BasisSpec.for_grid(regular_dataset.union_grid)
        init = CorrParams(alphas=np.ones(2), beta=1.0, nugget=0.0)
        model = fit_regular(regular_dataset, basis, init, FitOptions(n_restarts=1, seed=5, max_evals=400))
        dense = dense_neg_loglik(regular_dataset, basis, model.params)
        assert dense == pytest.approx(model.neg_loglik, rel=1e-8, abs=1e-8)

    def test_dense_fit_reaches_the_same_optimum(self, regular_dataset):
        basis = BasisSpec.for_grid(regular_dataset.union_grid)
        init = CorrParams(alphas=np.ones(2), beta=1.0, nugget=0.0)
        opts = FitOptions(n_restarts=2, seed=5, max_evals=600)
        model = fit_regular(regular_dataset, basis, init, opts)
        reference = dense_fit(regular_dataset, basis, init, opts)
        assert reference.value == pytest.approx(model.neg_loglik, abs=1e-3)
