"""
Tests for the min-max optimizer, main effects and cross-validation helpers.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from src.kriging.analysis import (
    CommonGridProcedure,
    EMCompletedProcedure,
    MinimaxOptions,
    main_effects,
    max_over_t,
    minimax_optimize,
    mscv,
    refine_grid,
)
from src.kriging.corr import CorrParams, Design, VariableSpec
from src.kriging.dataset import FunctionalDataset
from src.kriging.em_complete import EMOptions, Theta, run_em
from src.kriging.kron_kriging import BasisSpec, build_model
from src.kriging.stage1 import DecayTransform
from src.kriging.synthetic import latin_hypercube
from src.utils.errors import DataError

X_OPT = np.array([0.3, 0.6])


def _bowl(X, t):
    """(x1 - 0.3)^2 + (x2 - 0.6)^2 + 0.5 t, exactly representable by the basis below."""
    X = np.atleast_2d(X)
    return np.sum((X - X_OPT) ** 2, axis=1)[:, None] + 0.5 * np.asarray(t)[None, :]


@pytest.fixture
def bowl_model():
    design = latin_hypercube(20, 2, seed=8)
    grid = np.linspace(0.0, 1.0, 5)
    basis = BasisSpec.for_grid(grid, (1,), ((0, 1), (0, 2), (1, 1), (1, 2)))
    params = CorrParams(alphas=np.array([1.0, 1.0]), beta=1.0, nugget=0.0)
    return build_model(design, grid, _bowl(design.rows, grid), basis, params)


@dataclass
class StubModel:
    """Just enough of a fitted model for the inner maximization."""
    design: Design
    grid: np.ndarray
    table: np.ndarray

    def predict_profiles(self, X, t):
        return np.array([self.table[int(x[0]) - 1] for x in X])[:, :len(t)]


class TestInnerMax:

    def test_ties_go_to_the_lowest_t(self):
        design = Design(rows=np.array([[1.0]]), variables=(VariableSpec.categorical("c", 1),))
        model = StubModel(design=design, grid=np.array([0.0, 1.0, 2.0]), table=np.array([[1.0, 3.0, 3.0]]))
        result = max_over_t(model, np.array([1.0]))
        assert result.t == 1.0 and result.value == 3.0

    def test_ties_go_to_the_lowest_level(self):
        design = Design(rows=np.array([[1.0]]), variables=(VariableSpec.categorical("c", 3),))
        table = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, 2.0]])
        model = StubModel(design=design, grid=np.array([0.0, 1.0]), table=table)
        result = max_over_t(model, np.array([1.0]), max_vars=(0,))
        assert result.value == 2.0
        assert result.setting.tolist() == [2.0]
        assert result.t == 0.0

    def test_transform_changes_the_scale(self):
        design = Design(rows=np.array([[1.0]]), variables=(VariableSpec.categorical("c", 1),))
        model = StubModel(design=design, grid=np.array([0.0, 1.0]), table=np.array([[1.0, 2.0]]))
        plain = max_over_t(model, np.array([1.0]))
        decayed = max_over_t(model, np.array([1.0]), transform=DecayTransform(lam=1.0))
        assert plain.t == 1.0
        assert decayed.t == 0.0 and decayed.value == 1.0

    def test_refine_grid(self):
        assert refine_grid(np.array([0.0, 1.0, 2.0]), 2).tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert refine_grid(np.array([0.0, 1.0]), 1).tolist() == [0.0, 1.0]


class TestMinimax:

    def test_finds_the_bowl_minimum(self, bowl_model):
        result = minimax_optimize(bowl_model, opts=MinimaxOptions(restarts=4, seed=1))
        assert np.allclose(result.x_star, X_OPT, atol=0.01)
        assert result.worst_t == 1.0
        assert result.worst_value == pytest.approx(0.5, abs=1e-3)
        assert not result.exhausted

    def test_beats_every_design_row(self, bowl_model):
        result = minimax_optimize(bowl_model, opts=MinimaxOptions(restarts=2, seed=1))
        for row in bowl_model.design.rows:
            assert result.worst_value <= max_over_t(bowl_model, row).value + 1e-9

    def test_bounds_restrict_the_search(self, bowl_model):
        result = minimax_optimize(bowl_model, bounds=[(0.5, 1.0), (0.0, 1.0)], opts=MinimaxOptions(restarts=2))
        assert result.x_star[0] == pytest.approx(0.5, abs=1e-3)
        assert result.x_star[1] == pytest.approx(0.6, abs=0.01)

    def test_bounds_count_checked(self, bowl_model):
        with pytest.raises(ValueError):
            minimax_optimize(bowl_model, bounds=[(0.0, 1.0)])

    def test_result_serializes(self, bowl_model):
        payload = minimax_optimize(bowl_model, opts=MinimaxOptions(restarts=1, max_evals=50)).to_dict()
        assert set(payload) == {"x_star", "worst_t", "worst_value", "worst_setting", "trace", "exhausted"}


class TestMainEffects:

    def test_additive_truth(self, bowl_model):
        levels = np.array([0.0, 0.3, 0.8])
        curve = main_effects(bowl_model, 0, levels=levels, mc_nodes=64, seed=2)
        assert curve.effect.shape == (3, bowl_model.m)
        expected = (levels - 0.3) ** 2
        for j in range(3):
            assert np.allclose(curve.effect[j] - curve.effect[0], expected[j] - expected[0], atol=1e-8)
        assert np.allclose(np.diff(curve.effect[1]), 0.5 * np.diff(bowl_model.grid), atol=1e-8)

    def test_default_levels(self, bowl_model):
        curve = main_effects(bowl_model, 1, mc_nodes=16)
        assert curve.levels.size == 11
        assert curve.overall.shape == (bowl_model.m,)


class TestCrossValidation:

    def test_exact_procedure_scores_zero(self, regular_dataset):
        def exact(train, i, x, t):
            return regular_dataset.runs[i].y

        assert mscv(regular_dataset, exact, [0, 3, 5]) == 0.0

    def test_constant_offset(self, regular_dataset):
        def shifted(train, i, x, t):
            return regular_dataset.runs[i].y + 0.5

        assert mscv(regular_dataset, shifted, [1, 2]) == pytest.approx(0.25)

    def test_invalid_probe(self, regular_dataset):
        with pytest.raises(ValueError):
            mscv(regular_dataset, lambda train, i, x, t: np.zeros(t.size), [regular_dataset.n])

    def test_common_grid_procedure(self, small_params):
        design = latin_hypercube(4, 2, seed=6)
        profiles = [
            (np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0])),
            (np.array([0.0, 0.5]), np.array([0.5, 1.0])),
            (np.array([0.0, 0.5, 1.0]), np.array([2.0, 1.0, 0.0])),
            (np.array([0.0, 0.5, 1.0]), np.array([0.0, 0.0, 1.0])),
        ]
        dataset = FunctionalDataset.from_profiles(design, profiles)
        procedure = CommonGridProcedure(small_params, BasisSpec())
        model = procedure.model_for(dataset.without(0), 0)
        assert model.grid.tolist() == [0.0, 0.5]
        assert np.isfinite(mscv(dataset, procedure, [0, 2]))

    def test_common_grid_needs_shared_abscissae(self, small_params):
        design = latin_hypercube(3, 2, seed=6)
        profiles = [(np.array([0.0]), np.array([1.0])), (np.array([1.0]), np.array([2.0])),
                    (np.array([2.0]), np.array([3.0]))]
        dataset = FunctionalDataset.from_profiles(design, profiles)
        with pytest.raises(DataError):
            mscv(dataset, CommonGridProcedure(small_params, BasisSpec()), [0])

    def test_em_completed_procedure(self, small_params):
        design = latin_hypercube(6, 2, seed=4)
        grid = np.linspace(0.0, 1.0, 5)
        Y = np.sin(3.0 * grid)[None, :] + design.rows[:, :1]
        mask = np.ones(Y.shape, dtype=bool)
        mask[1, 3:] = False
        mask[4, 4:] = False
        dataset = FunctionalDataset.from_matrix(design, grid, Y, mask)
        basis = BasisSpec.for_grid(grid)
        theta = Theta(mu=np.zeros(1), sigma2=1.0, params=small_params)
        result = run_em(dataset, basis, theta, opts=EMOptions(q=2, max_iter=5, fix_correlation=True))
        procedure = EMCompletedProcedure(result, basis, q=2)
        prediction = procedure(dataset.without(1), 1, design.rows[1], dataset.runs[1].t)
        assert prediction.shape == (3,)
        assert np.all(np.isfinite(prediction))
        assert np.isfinite(mscv(dataset, procedure, [0, 1, 4]))
