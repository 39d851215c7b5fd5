"""
Tests for the correlation functions and the structured matrix algebra.
"""

import numpy as np
import pytest

from src.kriging.corr import (
    CorrParams,
    Design,
    VariableSpec,
    VarKind,
    build_R_t,
    build_R_x,
    corr_value,
    cross_corr_x,
    downdate_Rx_inverse,
    is_equally_spaced,
    kron_apply_inverse,
    logdet_kron,
    validate_grid,
)
from src.utils.errors import DimensionMismatch, InvalidGrid, SingularMatrix


class TestCorrValue:

    def test_continuous_exponent_one(self):
        assert corr_value(0.2, 0.7, VarKind.CONTINUOUS, 2.0, 1) == pytest.approx(np.exp(-1.0))

    def test_continuous_exponent_two(self):
        assert corr_value(0.2, 0.7, VarKind.CONTINUOUS, 2.0, 2) == pytest.approx(np.exp(-0.5))

    def test_categorical(self):
        assert corr_value(2, 2, VarKind.CATEGORICAL, 1.5, 1) == 1.0
        assert corr_value(1, 3, VarKind.CATEGORICAL, 1.5, 1) == pytest.approx(np.exp(-1.5))

    def test_zero_rate_is_fully_correlated(self):
        assert corr_value(0.0, 1.0, VarKind.CONTINUOUS, 0.0, 1) == 1.0


class TestDesign:

    def test_out_of_range_row(self):
        with pytest.raises(ValueError):
            Design(rows=np.array([[1.5]]), variables=(VariableSpec.continuous("x", 0.0, 1.0),))

    def test_bad_level_code(self):
        with pytest.raises(ValueError):
            Design(rows=np.array([[3.0]]), variables=(VariableSpec.categorical("c", 2),))

    def test_scaling_uses_declared_range(self):
        design = Design(rows=np.array([[2.0], [4.0]]), variables=(VariableSpec.continuous("x", 2.0, 6.0),))
        assert design.scaled()[:, 0].tolist() == [0.0, 0.5]

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Design(rows=np.zeros((2, 3)), variables=(VariableSpec.continuous("x", 0.0, 1.0),))


class TestBuildRx:

    def test_symmetric_with_nugget_diagonal(self, small_design):
        params = CorrParams(alphas=np.array([1.0, 2.0]), beta=1.0, nugget=1e-6)
        Rx = build_R_x(small_design, params)
        assert np.allclose(Rx.matrix, Rx.matrix.T)
        assert np.allclose(np.diag(Rx.matrix), 1.0 + 1e-6)
        assert np.allclose(Rx.lower @ Rx.lower.T, Rx.matrix)

    def test_mixed_variables(self):
        variables = (VariableSpec.continuous("x", 0.0, 2.0), VariableSpec.categorical("c", 3))
        design = Design(rows=np.array([[0.0, 1.0], [1.0, 2.0]]), variables=variables)
        params = CorrParams(alphas=np.array([2.0, 0.7]), beta=1.0, nugget=0.0)
        expected = np.exp(-2.0 * 0.5) * np.exp(-0.7)
        assert build_R_x(design, params).matrix[0, 1] == pytest.approx(expected)

    def test_duplicate_rows_without_nugget(self):
        design = Design.from_array(np.array([[0.3, 0.3], [0.3, 0.3], [0.9, 0.1]]))
        params = CorrParams(alphas=np.array([1.0, 1.0]), beta=1.0, nugget=0.0)
        with pytest.raises(SingularMatrix):
            build_R_x(design, params)

    def test_cross_correlation_at_design_rows(self, small_design):
        params = CorrParams(alphas=np.array([1.0, 2.0]), beta=1.0, nugget=0.0)
        cross = cross_corr_x(small_design, params, small_design.rows)
        assert np.allclose(cross, build_R_x(small_design, params).matrix)


class TestBuildRt:

    @pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
    def test_closed_form_matches_dense(self, rho):
        beta = -np.log(rho)
        for m in range(1, 65):
            grid = np.arange(m, dtype=float)
            closed = build_R_t(grid, beta, 1, 0.0)
            dense = build_R_t(grid, beta, 1, 0.0, force_dense=True)
            assert closed.is_closed_form and not dense.is_closed_form
            assert closed.log_det == pytest.approx(dense.log_det, abs=1e-9)
            assert np.allclose(closed.inverse(), dense.inverse(), atol=1e-9)

    def test_closed_form_log_determinant(self):
        grid = np.linspace(0.0, 2.0, 9)
        Rt = build_R_t(grid, 1.3, 1, 0.0)
        sign, logdet = np.linalg.slogdet(Rt.matrix())
        assert sign > 0
        assert Rt.log_det == pytest.approx(logdet, abs=1e-10)

    def test_uneven_grid_is_dense(self):
        Rt = build_R_t(np.array([0.0, 0.1, 0.5, 1.0]), 2.0, 1, 0.0)
        assert not Rt.is_closed_form
        assert np.allclose(Rt.solve(Rt.matrix()), np.eye(4), atol=1e-10)

    def test_squared_exponent_is_dense(self):
        Rt = build_R_t(np.linspace(0.0, 1.0, 5), 2.0, 2, 1e-8)
        assert not Rt.is_closed_form

    def test_not_increasing(self):
        with pytest.raises(InvalidGrid):
            build_R_t(np.array([0.0, 0.5, 0.5, 1.0]), 1.0, 1, 0.0)
        with pytest.raises(InvalidGrid):
            validate_grid(np.array([1.0, 0.0]))

    def test_equal_spacing(self):
        assert is_equally_spaced(np.linspace(3.0, 7.0, 11))
        assert not is_equally_spaced(np.array([0.0, 1.0, 3.0]))


class TestKronecker:

    @pytest.mark.parametrize("grid", [np.linspace(0.0, 1.0, 5), np.array([0.0, 0.2, 0.3, 0.7, 1.0])])
    def test_apply_inverse_matches_dense(self, small_design, grid, rng):
        params = CorrParams(alphas=np.array([1.5, 2.5]), beta=1.7, nugget=0.0)
        Rx = build_R_x(small_design, params)
        Rt = build_R_t(grid, params.beta, 1, 0.0)
        R = np.kron(Rx.matrix, Rt.matrix())
        v = rng.standard_normal(R.shape[0])
        assert np.allclose(kron_apply_inverse(Rx, Rt, v), np.linalg.solve(R, v), atol=1e-8)
        V = rng.standard_normal((R.shape[0], 3))
        assert np.allclose(kron_apply_inverse(Rx, Rt, V), np.linalg.solve(R, V), atol=1e-8)

    def test_log_determinant(self, small_design):
        params = CorrParams(alphas=np.array([1.5, 2.5]), beta=1.7, nugget=0.0)
        Rx = build_R_x(small_design, params)
        Rt = build_R_t(np.linspace(0.0, 1.0, 4), params.beta, 1, 0.0)
        _, expected = np.linalg.slogdet(np.kron(Rx.matrix, Rt.matrix()))
        assert logdet_kron(Rx, Rt) == pytest.approx(expected, abs=1e-8)

    def test_wrong_length(self, small_design):
        params = CorrParams(alphas=np.array([1.0, 1.0]), beta=1.0, nugget=0.0)
        Rx = build_R_x(small_design, params)
        Rt = build_R_t(np.linspace(0.0, 1.0, 4), 1.0, 1, 0.0)
        with pytest.raises(DimensionMismatch):
            kron_apply_inverse(Rx, Rt, np.zeros(5))


class TestDowndate:

    def test_matches_inverse_of_minor(self, small_design):
        params = CorrParams(alphas=np.array([1.0, 2.0]), beta=1.0, nugget=0.0)
        Rx = build_R_x(small_design, params)
        full_inv = Rx.inverse()
        for i in (0, 3, small_design.n - 1):
            keep = np.arange(small_design.n) != i
            expected = np.linalg.inv(Rx.matrix[np.ix_(keep, keep)])
            assert np.allclose(downdate_Rx_inverse(full_inv, i), expected, atol=1e-8)

    def test_index_out_of_range(self):
        with pytest.raises(DimensionMismatch):
            downdate_Rx_inverse(np.eye(3), 3)
