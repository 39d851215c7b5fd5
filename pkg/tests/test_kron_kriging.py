"""
Tests for the Kronecker kriging path, checked against the dense reference.
"""

import numpy as np
import pytest

from src.kriging.corr import CorrParams, Design
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import (
    BasisSpec,
    FitOptions,
    build_model,
    fit_regular,
    gls_mu,
    loo_profile,
    neg_profile_loglik,
    profile_fit,
    sigma2_hat,
)
from src.kriging.oracle import DenseSystem, dense_ci, dense_model, dense_neg_loglik, dense_predict
from src.kriging.synthetic import latin_hypercube, sample_profiles
from src.utils.errors import DataError, RankDeficientBasis


def _instance(seed, n, grid, params, basis_terms=((1,), ((0, 1),))):
    design = latin_hypercube(n, 2, seed=seed)
    basis = BasisSpec.for_grid(grid, *basis_terms)
    mu = np.arange(1, basis.size + 1, dtype=float)
    Y = sample_profiles(design, grid, basis, mu, 1.5, params, np.random.default_rng(seed))
    return FunctionalDataset.from_matrix(design, grid, Y), basis


def _random_cases(count=50, seed=2024):
    """
    Seeded regular-grid instances with n in 2..6 and m in 2..8, cycling through
    equally and unevenly spaced grids at d = 1 and d = 2.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(count):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(2, 9))
        if k % 2 == 0:
            grid = np.linspace(0.0, 2.0, m)
        else:
            steps = np.concatenate([[0.0], rng.uniform(0.5, 1.5, m - 1)])
            grid = 2.0 * np.cumsum(steps) / steps.sum()
        d = 2 if k % 4 in (1, 2) else 1
        if d == 1:
            params = CorrParams(alphas=rng.uniform(0.5, 4.0, 2), beta=float(rng.uniform(0.5, 3.0)), d=1,
                                nugget=0.0)
        else:
            params = CorrParams(alphas=rng.uniform(3.0, 8.0, 2), beta=float(rng.uniform(3.0, 8.0)), d=2,
                                nugget=1e-6)
        cases.append((k + 1, n, grid, params))
    return cases


CASES = _random_cases()


class TestAgainstDense:
    """Kronecker and dense computations agree on small random instances."""

    @pytest.mark.parametrize("seed,n,grid,params", CASES)
    def test_likelihood(self, seed, n, grid, params):
        dataset, basis = _instance(seed, n, grid, params)
        kron = neg_profile_loglik(params, dataset, basis)
        dense = dense_neg_loglik(dataset, basis, params)
        assert kron == pytest.approx(dense, rel=1e-8, abs=1e-8)

    @pytest.mark.parametrize("seed,n,grid,params", CASES)
    def test_mean_and_variance(self, seed, n, grid, params):
        dataset, basis = _instance(seed, n, grid, params)
        model = build_model(dataset.design, grid, dataset.matrix(), basis, params)
        reference = dense_model(dataset, basis, params)
        assert np.allclose(model.mu, reference.mu, atol=1e-8)
        assert model.sigma2 == pytest.approx(reference.sigma2, rel=1e-8)

    @pytest.mark.parametrize("seed,n,grid,params", CASES)
    def test_prediction_and_interval(self, seed, n, grid, params):
        dataset, basis = _instance(seed, n, grid, params)
        model = build_model(dataset.design, grid, dataset.matrix(), basis, params)
        reference = dense_model(dataset, basis, params)
        probe_rng = np.random.default_rng(seed + 100)
        for _ in range(5):
            x = probe_rng.uniform(0.0, 1.0, 2)
            t = probe_rng.uniform(grid[0], grid[-1])
            assert model.predict(x, t) == pytest.approx(dense_predict(reference, x, t), abs=1e-7)
            lo, hi = model.predict_ci(x, t, kappa=0.1)
            ref_lo, ref_hi = dense_ci(reference, x, t, kappa=0.1)
            assert lo == pytest.approx(ref_lo, abs=1e-6)
            assert hi == pytest.approx(ref_hi, abs=1e-6)

    def test_gls_helpers(self):
        seed, n, grid, params = CASES[2]
        dataset, basis = _instance(seed, n, grid, params)
        fit = profile_fit(dataset.design, grid, dataset.matrix(), basis, params)
        V = basis.rows(dataset.design.scaled(), grid)
        y = dataset.matrix().reshape(-1)
        mu = gls_mu(y, V, fit.Rx, fit.Rt)
        reference = dense_model(dataset, basis, params)
        assert np.allclose(mu, reference.mu, atol=1e-8)
        assert sigma2_hat(y, V, mu, fit.Rx, fit.Rt) == pytest.approx(reference.sigma2, rel=1e-8)

    def test_closed_form_and_cholesky_paths(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        basis = BasisSpec.for_grid(grid, (1,))
        Y = regular_dataset.matrix()
        closed = profile_fit(regular_dataset.design, grid, Y, basis, small_params)
        dense = profile_fit(regular_dataset.design, grid, Y, basis, small_params, force_dense=True)
        assert closed.Rt.is_closed_form and not dense.Rt.is_closed_form
        assert closed.value == pytest.approx(dense.value, abs=1e-8)


class TestPrediction:

    def test_interpolates_without_nugget(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), BasisSpec.for_grid(grid),
                            small_params)
        design = regular_dataset.design
        for i in (0, 4, 7):
            assert np.allclose(model.predict_profile(design.rows[i], grid), regular_dataset.runs[i].y, atol=1e-8)

    def test_interval_collapses_at_training_point(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), BasisSpec.for_grid(grid),
                            small_params)
        lo, hi = model.predict_ci(regular_dataset.design.rows[2], grid[3])
        assert hi - lo < 1e-4
        assert lo - 1e-6 <= regular_dataset.runs[2].y[3] <= hi + 1e-6

    def test_interval_widens_away_from_data(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), BasisSpec.for_grid(grid),
                            small_params)
        near_lo, near_hi = model.predict_ci(regular_dataset.design.rows[2], grid[3])
        far_lo, far_hi = model.predict_ci(regular_dataset.design.rows[2], 0.5 * (grid[2] + grid[3]))
        assert far_hi - far_lo > near_hi - near_lo

    def test_invalid_kappa(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), BasisSpec.for_grid(grid),
                            small_params)
        with pytest.raises(ValueError):
            model.predict_ci(regular_dataset.design.rows[0], grid[0], kappa=1.5)

    def test_extrapolation_flag(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), BasisSpec.for_grid(grid),
                            small_params)
        assert model.is_extrapolation(np.array([0.5, 0.5]), 1.5)
        assert not model.is_extrapolation(np.array([0.5, 0.5]), 0.5)


class TestLeaveOneOut:

    def test_closed_form_residuals_match_brute_force(self):
        grid = np.linspace(0.0, 1.0, 4)
        params = CorrParams(alphas=np.array([2.0, 2.0]), beta=1.0, d=1, nugget=0.0)
        dataset, basis = _instance(9, 5, grid, params)
        model = build_model(dataset.design, grid, dataset.matrix(), basis, params)
        system = DenseSystem.from_dataset(dataset, basis, params)

        expected = np.empty(system.N)
        for k in range(system.N):
            keep = np.arange(system.N) != k
            R, V, y = system.R[np.ix_(keep, keep)], system.V[keep], system.y[keep]
            Rinv_V = np.linalg.solve(R, V)
            mu = np.linalg.solve(V.T @ Rinv_V, Rinv_V.T @ y)
            r = system.R[k, keep]
            prediction = system.V[k] @ mu + r @ np.linalg.solve(R, y - V @ mu)
            expected[k] = system.y[k] - prediction

        assert np.allclose(model.loo_residuals().reshape(-1), expected, atol=1e-7)

    def test_loo_profile_needs_three_runs(self, small_params):
        grid = np.linspace(0.0, 1.0, 4)
        dataset, basis = _instance(5, 2, grid, small_params, ((), ()))
        with pytest.raises(DataError):
            loo_profile(dataset, basis, FitOptions(n_restarts=0), 0)

    def test_loo_profile_at_fixed_parameters(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        basis = BasisSpec.for_grid(grid)
        model = build_model(regular_dataset.design, grid, regular_dataset.matrix(), basis, small_params)
        result = loo_profile(regular_dataset, basis, FitOptions(n_restarts=0), 3, model=model)
        assert result.run == 3
        assert result.y_hat.shape == grid.shape
        assert np.all(result.lo <= result.y_hat) and np.all(result.y_hat <= result.hi)
        assert np.isfinite(result.mse)

class TestInvariances:

    @staticmethod
    def _model(dataset, Y, params, basis):
        return build_model(dataset.design, dataset.union_grid, Y, basis, params)

    def test_predictor_is_linear_in_the_responses(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        basis = BasisSpec.for_grid(grid, (1,))
        first_Y = regular_dataset.matrix()
        second_Y = np.cos(2.0 * grid)[None, :] * (1.0 + regular_dataset.design.rows[:, :1])
        models = [self._model(regular_dataset, Y, small_params, basis)
                  for Y in (first_Y, second_Y, 2.0 * first_Y - 3.0 * second_Y)]
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.uniform(0.0, 1.0, 2)
            t = rng.uniform(grid[0], grid[-1])
            first, second, combined = (model.predict(x, t) for model in models)
            assert combined == pytest.approx(2.0 * first - 3.0 * second, abs=1e-9)

    def test_interval_narrows_as_kappa_grows(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        model = self._model(regular_dataset, regular_dataset.matrix(), small_params, BasisSpec.for_grid(grid))
        rng = np.random.default_rng(5)
        for _ in range(5):
            x = rng.uniform(0.0, 1.0, 2)
            t = rng.uniform(grid[0], grid[-1])
            wide_lo, wide_hi = model.predict_ci(x, t, kappa=0.01)
            narrow_lo, narrow_hi = model.predict_ci(x, t, kappa=0.10)
            assert wide_hi - wide_lo > narrow_hi - narrow_lo

    def test_constant_shift_moves_only_the_intercept(self, regular_dataset, small_params):
        grid = regular_dataset.union_grid
        basis = BasisSpec.for_grid(grid, (1,), ((0, 1),))
        Y = regular_dataset.matrix()
        shifted = FunctionalDataset.from_matrix(regular_dataset.design, grid, Y + 2.5)
        base = self._model(regular_dataset, Y, small_params, basis)
        moved = self._model(shifted, Y + 2.5, small_params, basis)
        assert moved.mu[0] == pytest.approx(base.mu[0] + 2.5, abs=1e-9)
        assert np.allclose(moved.mu[1:], base.mu[1:], atol=1e-9)
        assert moved.sigma2 == pytest.approx(base.sigma2, rel=1e-9)
        for params in (small_params, small_params.replace(beta=0.7)):
            assert neg_profile_loglik(params, shifted, basis) == pytest.approx(
                neg_profile_loglik(params, regular_dataset, basis), rel=1e-9, abs=1e-9)

    def test_duplicated_run_is_recovered(self):
        grid = np.linspace(0.0, 1.0, 5)
        params = CorrParams(alphas=np.array([2.0, 2.0]), beta=1.0, d=1, nugget=1e-6)
        rows = latin_hypercube(6, 2, seed=8).rows.copy()
        rows[4] = rows[1]
        design = Design.from_array(rows)
        basis = BasisSpec.for_grid(grid)
        Y = sample_profiles(design, grid, basis, np.zeros(1), 1.0, params, np.random.default_rng(8))
        Y[4] = Y[1]
        dataset = FunctionalDataset.from_matrix(design, grid, Y)
        model = build_model(design, grid, Y, basis, params)
        result = loo_profile(dataset, basis, FitOptions(n_restarts=0), 4, model=model)
        assert np.allclose(result.y_hat, Y[1], atol=1e-3)
        assert result.mse >= 0.0



class TestFit:

    def test_rank_deficient_basis(self):
        design = latin_hypercube(4, 2, seed=1)
        grid = np.array([0.5])
        basis = BasisSpec.for_grid(grid, t_terms=(1,))
        params = CorrParams(alphas=np.array([1.0, 1.0]), beta=1.0, nugget=0.0)
        with pytest.raises(RankDeficientBasis):
            profile_fit(design, grid, np.ones((4, 1)), basis, params)

    def test_fit_does_not_worsen_the_start(self, regular_dataset, small_params):
        basis = BasisSpec.for_grid(regular_dataset.union_grid)
        init = small_params.replace(alphas=np.array([1.0, 1.0]), beta=1.0)
        start_value = neg_profile_loglik(init, regular_dataset, basis)
        model = fit_regular(regular_dataset, basis, init, FitOptions(n_restarts=2, seed=4, max_evals=400))
        assert model.neg_loglik <= start_value + 1e-9
        assert np.all(np.abs(np.log(model.params.alphas)) <= 8.0 + 1e-12)

    def test_fit_is_reproducible(self, regular_dataset, small_params):
        basis = BasisSpec.for_grid(regular_dataset.union_grid)
        opts = FitOptions(n_restarts=2, seed=4, max_evals=300)
        first = fit_regular(regular_dataset, basis, small_params, opts)
        second = fit_regular(regular_dataset, basis, small_params, opts)
        assert np.array_equal(first.params.alphas, second.params.alphas)
        assert first.params.beta == second.params.beta

    def test_irregular_data_rejected(self, truncated_data, small_params):
        basis = BasisSpec.for_grid(truncated_data.grid)
        with pytest.raises(DataError):
            fit_regular(truncated_data.dataset, basis, small_params)

    def test_design_without_variables(self):
        grid = np.linspace(0.0, 1.0, 8)
        design = Design.empty(1)
        y = np.sin(3 * grid).reshape(1, -1)
        init = CorrParams(alphas=np.zeros(0), beta=1.0, nugget=0.0)
        model = fit_regular(FunctionalDataset.from_matrix(design, grid, y), BasisSpec.for_grid(grid, (1,)), init,
                            FitOptions(n_restarts=1, seed=2))
        assert np.allclose(model.predict_profile(np.zeros(0), grid), y[0], atol=1e-8)
