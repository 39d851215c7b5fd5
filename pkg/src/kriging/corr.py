"""
Correlation Module
Power-exponential / isotropic categorical correlations and the structured
correlation-matrix algebra used by the Kronecker kriging path: build, factorize,
invert, log-determinant and Kronecker-apply.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from src.utils.errors import DimensionMismatch, InvalidGrid, NumericalBreakdown, SingularMatrix

logger = logging.getLogger(__name__)

EQUAL_SPACING_RTOL = 1e-9
BREAKDOWN_PIVOT = 1e-12
RANGE_TOL = 1e-9


class VarKind(str, Enum):
    """Kind of an experimental variable."""
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


class TRepresentation(str, Enum):
    """Storage form of the functional-index correlation matrix."""
    DENSE = "dense"
    TRIDIAGONAL = "tridiagonal"


@dataclass(frozen=True)
class VariableSpec:
    """One design column: a continuous range or a categorical level count."""
    name: str
    kind: VarKind = VarKind.CONTINUOUS
    lo: float = 0.0
    hi: float = 1.0
    levels: int = 0

    def __post_init__(self):
        if self.kind == VarKind.CONTINUOUS and not self.hi > self.lo:
            raise ValueError(f"Variable '{self.name}': empty range [{self.lo}, {self.hi}]")
        if self.kind == VarKind.CATEGORICAL and self.levels < 1:
            raise ValueError(f"Variable '{self.name}': categorical needs at least one level")

    @classmethod
    def continuous(cls, name: str, lo: float, hi: float) -> "VariableSpec":
        return cls(name=name, kind=VarKind.CONTINUOUS, lo=float(lo), hi=float(hi))

    @classmethod
    def categorical(cls, name: str, levels: int) -> "VariableSpec":
        return cls(name=name, kind=VarKind.CATEGORICAL, levels=int(levels))

    @property
    def is_categorical(self) -> bool:
        return self.kind == VarKind.CATEGORICAL

    def scale(self, values: np.ndarray) -> np.ndarray:
        """Rescale continuous values to [0, 1]; categorical codes pass through."""
        values = np.asarray(values, dtype=float)
        if self.is_categorical:
            return values
        return (values - self.lo) / (self.hi - self.lo)

    def level_values(self) -> np.ndarray:
        return np.arange(1, self.levels + 1, dtype=float)

    def to_dict(self) -> Dict[str, Any]:
        if self.is_categorical:
            return {"name": self.name, "kind": self.kind.value, "levels": self.levels}
        return {"name": self.name, "kind": self.kind.value, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VariableSpec":
        if data["kind"] == VarKind.CATEGORICAL.value:
            return cls.categorical(data["name"], data["levels"])
        return cls.continuous(data["name"], data["lo"], data["hi"])


@dataclass(frozen=True)
class Design:
    """n experimental settings over p declared variables."""
    rows: np.ndarray
    variables: Tuple[VariableSpec, ...]

    def __post_init__(self):
        variables = tuple(self.variables)
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(1, -1) if variables else rows.reshape(-1, 0)
        if rows.ndim != 2 or rows.shape[1] != len(variables):
            raise DimensionMismatch(
                f"Design rows have shape {rows.shape} but {len(variables)} variables are declared"
            )
        for k, spec in enumerate(variables):
            column = rows[:, k]
            if spec.is_categorical:
                bad = (np.abs(column - np.round(column)) > RANGE_TOL) | (column < 1) | (column > spec.levels)
                if np.any(bad):
                    run = int(np.argmax(bad))
                    raise ValueError(
                        f"Design row {run}: '{spec.name}'={column[run]} is not a level code in 1..{spec.levels}"
                    )
            else:
                tol = RANGE_TOL * (spec.hi - spec.lo)
                bad = (column < spec.lo - tol) | (column > spec.hi + tol)
                if np.any(bad):
                    run = int(np.argmax(bad))
                    raise ValueError(
                        f"Design row {run}: '{spec.name}'={column[run]} outside [{spec.lo}, {spec.hi}]"
                    )
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "variables", variables)

    @classmethod
    def from_array(cls, rows: np.ndarray, bounds: Optional[Sequence[Tuple[float, float]]] = None,
                   names: Optional[Sequence[str]] = None) -> "Design":
        """All-continuous design; bounds default to the unit cube."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        p = rows.shape[1]
        bounds = bounds or [(0.0, 1.0)] * p
        names = names or [f"x{k + 1}" for k in range(p)]
        specs = tuple(VariableSpec.continuous(nm, lo, hi) for nm, (lo, hi) in zip(names, bounds))
        return cls(rows=rows, variables=specs)

    @classmethod
    def empty(cls, n: int = 1) -> "Design":
        """Design with n settings and no variables (pure functional-index models)."""
        return cls(rows=np.zeros((n, 0)), variables=())

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.variables)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([spec.is_categorical for spec in self.variables], dtype=bool)

    def scale_points(self, points: np.ndarray) -> np.ndarray:
        """Rescale arbitrary settings (k, p) with this design's declared ranges."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(1, -1)
        if points.shape[1] != self.p:
            raise DimensionMismatch(f"Settings have {points.shape[1]} coordinates, design has {self.p}")
        out = np.empty_like(points)
        for k, spec in enumerate(self.variables):
            out[:, k] = spec.scale(points[:, k])
        return out

    def scaled(self) -> np.ndarray:
        return self.scale_points(self.rows)

    def contains(self, point: np.ndarray) -> bool:
        """Whether a setting lies inside the declared design space."""
        point = np.asarray(point, dtype=float).reshape(-1)
        for value, spec in zip(point, self.variables):
            if spec.is_categorical:
                if value < 1 or value > spec.levels:
                    return False
            elif value < spec.lo or value > spec.hi:
                return False
        return True

    def subset(self, indices: Sequence[int]) -> "Design":
        return Design(rows=self.rows[np.asarray(indices, dtype=int)], variables=self.variables)

    def without(self, i: int) -> "Design":
        keep = [k for k in range(self.n) if k != i]
        return self.subset(keep)


@dataclass(frozen=True)
class CorrParams:
    """Correlation parameters: per-variable rates, functional-index rate, exponent, nugget."""
    alphas: np.ndarray
    beta: float
    d: int = 1
    nugget: float = 1e-8

    def __post_init__(self):
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float)).reshape(-1)
        if np.any(alphas < 0) or not np.all(np.isfinite(alphas)):
            raise ValueError(f"alphas must be finite and nonnegative, got {alphas}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.d not in (1, 2):
            raise ValueError(f"exponent d must be 1 or 2, got {self.d}")
        if not self.nugget >= 0:
            raise ValueError(f"nugget must be nonnegative, got {self.nugget}")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "nugget", float(self.nugget))

    @property
    def p(self) -> int:
        return self.alphas.size

    @property
    def rho(self) -> float:
        """Unit-spacing lag-one correlation, exp(-beta)."""
        return float(np.exp(-self.beta))

    def replace(self, **changes) -> "CorrParams":
        return replace(self, **changes)

    def log_vector(self, fit_alpha: bool = True, fit_beta: bool = True) -> np.ndarray:
        parts = []
        if fit_alpha:
            parts.append(np.log(np.maximum(self.alphas, np.finfo(float).tiny)))
        if fit_beta:
            parts.append([np.log(max(self.beta, np.finfo(float).tiny))])
        return np.concatenate(parts) if parts else np.zeros(0)

    def from_log_vector(self, vector: np.ndarray, fit_alpha: bool = True, fit_beta: bool = True) -> "CorrParams":
        vector = np.asarray(vector, dtype=float)
        alphas, beta = self.alphas, self.beta
        offset = 0
        if fit_alpha:
            alphas = np.exp(vector[:self.p])
            offset = self.p
        if fit_beta:
            beta = float(np.exp(vector[offset]))
        return replace(self, alphas=alphas, beta=beta)

    def to_dict(self) -> Dict[str, Any]:
        return {"alphas": self.alphas.tolist(), "beta": self.beta, "d": self.d, "nugget": self.nugget}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CorrParams":
        return cls(alphas=np.asarray(data["alphas"], dtype=float), beta=data["beta"],
                   d=int(data["d"]), nugget=data["nugget"])


# ----------------------------------------------------------------------
# Scalar and vectorized correlation functions
# ----------------------------------------------------------------------

def corr_value(a: float, b: float, kind: VarKind, alpha: float, d: int) -> float:
    """
    Correlation between two coordinates of one variable.

    Continuous: exp(-alpha |a-b|^d). Categorical: 1 when the levels agree,
    exp(-alpha) otherwise.
    """
    if kind == VarKind.CATEGORICAL:
        return 1.0 if a == b else float(np.exp(-alpha))
    return float(np.exp(-alpha * abs(a - b) ** d))


def _variable_corr(u: np.ndarray, v: np.ndarray, kind: VarKind, alpha: float, d: int) -> np.ndarray:
    if kind == VarKind.CATEGORICAL:
        return np.where(u[:, None] == v[None, :], 1.0, np.exp(-alpha))
    return np.exp(-alpha * np.abs(u[:, None] - v[None, :]) ** d)


def cross_corr_x(design: Design, params: CorrParams, points: np.ndarray) -> np.ndarray:
    """Correlations (k, n) between settings and the design rows (no nugget)."""
    if params.p != design.p:
        raise DimensionMismatch(f"{params.p} alphas for a {design.p}-variable design")
    left = design.scale_points(points)
    right = design.scaled()
    out = np.ones((left.shape[0], right.shape[0]))
    for k, spec in enumerate(design.variables):
        out *= _variable_corr(left[:, k], right[:, k], spec.kind, params.alphas[k], params.d)
    return out


def corr_t(a: np.ndarray, b: np.ndarray, beta: float, d: int) -> np.ndarray:
    """Functional-index correlations exp(-beta |a_i - b_j|^d), shape (len(a), len(b))."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return np.exp(-beta * np.abs(a[:, None] - b[None, :]) ** d)


# ----------------------------------------------------------------------
# Factorizations
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CholeskyFactor:
    """A symmetric positive-definite matrix with its lower Cholesky factor."""
    matrix: np.ndarray
    lower: np.ndarray

    @classmethod
    def of(cls, matrix: np.ndarray, what: str = "correlation matrix") -> "CholeskyFactor":
        matrix = np.asarray(matrix, dtype=float)
        matrix = 0.5 * (matrix + matrix.T)
        try:
            lower = linalg.cholesky(matrix, lower=True)
        except linalg.LinAlgError as exc:
            raise SingularMatrix(f"Cholesky of the {what} ({matrix.shape[0]}x{matrix.shape[0]}) failed: {exc}")
        if not np.all(np.isfinite(lower)) or np.any(np.diag(lower) <= 0):
            raise SingularMatrix(f"Cholesky of the {what} produced a non-positive pivot")
        return cls(matrix=matrix, lower=lower)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.lower))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.size))


def build_R_x(design: Design, params: CorrParams) -> CholeskyFactor:
    """
    Correlation matrix over the design rows, factorized.

    Entry (i, j) is the product of per-variable correlations on rescaled
    coordinates; the diagonal is 1 + nugget.

    Raises:
        SingularMatrix: Cholesky failed (duplicated rows with nugget = 0)
    """
    if design.n < 1:
        raise DimensionMismatch("Design has no rows")
    matrix = cross_corr_x(design, params, design.rows)
    matrix[np.diag_indices_from(matrix)] = 1.0 + params.nugget
    return CholeskyFactor.of(matrix, what="R_X")


def is_equally_spaced(grid: np.ndarray) -> bool:
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        return True
    steps = np.diff(grid)
    mean_step = steps.mean()
    return bool(np.max(np.abs(steps - mean_step)) / mean_step < EQUAL_SPACING_RTOL)


def validate_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.ndim != 1 or grid.size < 1:
        raise InvalidGrid("Grid must be a nonempty vector of abscissae")
    if not np.all(np.isfinite(grid)):
        raise InvalidGrid("Grid contains non-finite abscissae")
    steps = np.diff(grid)
    if np.any(steps <= 0):
        j = int(np.argmax(steps <= 0))
        raise InvalidGrid(f"Grid not strictly increasing at position {j + 1}: {grid[j]} -> {grid[j + 1]}")
    return grid


def _tridiagonal_apply(rho: float, b: np.ndarray) -> np.ndarray:
    """Apply the closed-form inverse of the AR(1) correlation matrix along axis 0."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] == 1:
        return b.copy()
    out = b.copy()
    out[1:-1] *= 1.0 + rho * rho
    out[:-1] -= rho * b[1:]
    out[1:] -= rho * b[:-1]
    return out / (1.0 - rho * rho)


@dataclass(frozen=True)
class StructuredCorrT:
    """Correlation matrix over the functional-index grid in dense or tridiagonal-inverse form."""
    grid: np.ndarray
    beta: float
    d: int
    nugget: float
    representation: TRepresentation
    log_det: float
    rho: float = float("nan")
    chol: Optional[CholeskyFactor] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.grid.size

    @property
    def is_closed_form(self) -> bool:
        return self.representation == TRepresentation.TRIDIAGONAL

    def matrix(self) -> np.ndarray:
        """Dense R_t (including the nugget on the dense path)."""
        if self.chol is not None:
            return self.chol.matrix.copy()
        return corr_t(self.grid, self.grid, self.beta, self.d)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """R_t^{-1} b along axis 0."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.m:
            raise DimensionMismatch(f"Right-hand side has {b.shape[0]} rows, grid has {self.m} points")
        if self.is_closed_form:
            return _tridiagonal_apply(self.rho, b)
        return self.chol.solve(b)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.m))

    def cross(self, t_new: np.ndarray) -> np.ndarray:
        """Correlations (k, m) between new index points and the grid."""
        return corr_t(t_new, self.grid, self.beta, self.d)


def build_R_t(grid: np.ndarray, beta: float, d: int, nugget: float, force_dense: bool = False) -> StructuredCorrT:
    """
    Build the functional-index correlation structure.

    Equally spaced grids with d = 1 and no nugget use the AR(1) closed form:
    tridiagonal inverse and log|R_t| = (m-1) log(1 - rho^2), rho = exp(-beta h).
    Everything else is a dense Cholesky of R_t + nugget I.

    Raises:
        InvalidGrid: abscissae not strictly increasing
        SingularMatrix: the matrix cannot be factorized
    """
    grid = validate_grid(grid)
    grid.setflags(write=False)
    m = grid.size

    if not force_dense and d == 1 and nugget == 0 and is_equally_spaced(grid):
        rho = float(np.exp(-beta * np.diff(grid).mean())) if m > 1 else 0.0
        if rho >= 1.0:
            raise SingularMatrix("beta = 0 makes the equally spaced R_t singular")
        log_det = (m - 1) * float(np.log1p(-rho * rho))
        return StructuredCorrT(grid=grid, beta=float(beta), d=d, nugget=0.0,
                               representation=TRepresentation.TRIDIAGONAL, log_det=log_det, rho=rho)

    matrix = corr_t(grid, grid, beta, d)
    matrix[np.diag_indices_from(matrix)] += nugget
    chol = CholeskyFactor.of(matrix, what="R_t")
    return StructuredCorrT(grid=grid, beta=float(beta), d=d, nugget=float(nugget),
                           representation=TRepresentation.DENSE, log_det=chol.logdet, chol=chol)


# ----------------------------------------------------------------------
# Kronecker algebra
# ----------------------------------------------------------------------

def kron_apply_inverse(Rx: CholeskyFactor, Rt: StructuredCorrT, v: np.ndarray) -> np.ndarray:
    """
    (R_X^{-1} kron R_t^{-1}) v without forming the nm x nm matrix.

    v is run-major (index i*m + j) with shape (n*m,) or (n*m, k).
    """
    v = np.asarray(v, dtype=float)
    n, m = Rx.size, Rt.m
    if v.shape[0] != n * m:
        raise DimensionMismatch(f"Vector of length {v.shape[0]} does not match n*m = {n}*{m}")
    tail = v.shape[1:]
    block = v.reshape(n, m, -1)
    k = block.shape[2]
    # R_X^{-1} over the run axis
    step = Rx.solve(block.reshape(n, m * k)).reshape(n, m, k)
    # R_t^{-1} over the index axis
    step = step.transpose(1, 0, 2).reshape(m, n * k)
    step = Rt.solve(step).reshape(m, n, k).transpose(1, 0, 2)
    return step.reshape((n * m,) + tail)


def logdet_kron(Rx: CholeskyFactor, Rt: StructuredCorrT, n: Optional[int] = None, m: Optional[int] = None) -> float:
    """log|R_X kron R_t| = m log|R_X| + n log|R_t|."""
    n = Rx.size if n is None else n
    m = Rt.m if m is None else m
    return m * Rx.logdet + n * Rt.log_det


def downdate_Rx_inverse(Rx_inv: np.ndarray, i: int) -> np.ndarray:
    """
    Inverse of R_X with row/column i deleted, from the full inverse.

    With the full inverse partitioned as [[A, a], [a', b]] around run i,
    the minor's inverse is A - a a' / b.

    Raises:
        NumericalBreakdown: |b| below the pivot threshold
    """
    Rx_inv = np.asarray(Rx_inv, dtype=float)
    n = Rx_inv.shape[0]
    if not 0 <= i < n:
        raise DimensionMismatch(f"Run index {i} out of range for n = {n}")
    b = Rx_inv[i, i]
    if abs(b) < BREAKDOWN_PIVOT:
        raise NumericalBreakdown(f"Downdate pivot for run {i} is {b:.3e}")
    keep = np.arange(n) != i
    A = Rx_inv[np.ix_(keep, keep)]
    a = Rx_inv[keep, i]
    out = A - np.outer(a, a) / b
    return 0.5 * (out + out.T)
