"""
Dense reference implementations: kriging on the full N x N system and exact
joint-Gaussian conditioning of missing grid values. Deliberately naive; used
by tests, validation and the benchmark.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from config.settings import settings
from src.kriging.corr import CorrParams, Design, VarKind
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, FitOptions
from src.utils.errors import SizeCapExceeded

logger = logging.getLogger(__name__)

LOG_BOUND = 8.0


def _unit(design: Design, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = X.copy()
    for k, spec in enumerate(design.variables):
        if spec.kind == VarKind.CONTINUOUS:
            out[:, k] = (X[:, k] - spec.lo) / (spec.hi - spec.lo)
    return out


def _x_corr(design: Design, A: np.ndarray, B: np.ndarray, alphas: np.ndarray, d: int) -> np.ndarray:
    """Product correlation between every row of A and every row of B (unit-scaled)."""
    value = np.ones((A.shape[0], B.shape[0]))
    for k, spec in enumerate(design.variables):
        a, b = A[:, k][:, None], B[:, k][None, :]
        if spec.kind == VarKind.CATEGORICAL:
            value *= np.where(a == b, 1.0, np.exp(-alphas[k]))
        else:
            value *= np.exp(-alphas[k] * np.abs(a - b) ** d)
    return value


def _t_nugget(grid: np.ndarray, params: CorrParams) -> float:
    if params.d != 1:
        return params.nugget
    if grid.size < 2:
        return 0.0
    steps = np.diff(grid)
    equal = np.max(np.abs(steps - steps.mean())) / steps.mean() < 1e-9
    return 0.0 if equal else params.nugget


def _basis_row(basis: BasisSpec, xs: np.ndarray, t: float) -> np.ndarray:
    u = (t - basis.t_offset) / basis.t_scale
    row = [1.0] + [u ** p for p in basis.t_terms] + [xs[k] ** p for k, p in basis.x_terms]
    return np.array(row)


@dataclass
class DenseSystem:
    """Full correlation matrix over the stacked points (run, t) with basis and responses."""
    design: Design
    basis: BasisSpec
    params: CorrParams
    runs: np.ndarray
    t: np.ndarray
    y: np.ndarray
    R: np.ndarray
    V: np.ndarray
    t_nugget: float

    @classmethod
    def build(cls, design: Design, basis: BasisSpec, params: CorrParams, runs: np.ndarray, t: np.ndarray,
              y: np.ndarray, grid: np.ndarray) -> "DenseSystem":
        xs = _unit(design, design.rows)
        t_nugget = _t_nugget(np.asarray(grid, dtype=float), params)
        N = runs.size
        points = xs[runs]
        rx = _x_corr(design, points, points, params.alphas, params.d)
        rx += params.nugget * (runs[:, None] == runs[None, :])
        rt = np.exp(-params.beta * np.abs(t[:, None] - t[None, :]) ** params.d)
        rt += t_nugget * (t[:, None] == t[None, :])
        R = rx * rt
        V = np.array([_basis_row(basis, xs[runs[a]], t[a]) for a in range(N)]).reshape(N, basis.size)
        return cls(design=design, basis=basis, params=params, runs=runs, t=t, y=y, R=R, V=V, t_nugget=t_nugget)

    @classmethod
    def from_dataset(cls, dataset: FunctionalDataset, basis: BasisSpec, params: CorrParams) -> "DenseSystem":
        runs = np.concatenate([np.full(run.size, i) for i, run in enumerate(dataset.runs)]).astype(int)
        t = np.concatenate([run.t for run in dataset.runs])
        y = np.concatenate([run.y for run in dataset.runs])
        return cls.build(dataset.design, basis, params, runs, t, y, dataset.union_grid)

    @property
    def N(self) -> int:
        return self.y.size

    def cross(self, x: np.ndarray, t: float) -> np.ndarray:
        xs = _unit(self.design, self.design.rows)
        xn = _unit(self.design, np.reshape(x, (1, -1)))[0]
        rx = _x_corr(self.design, xn[None, :], xs[self.runs], self.params.alphas, self.params.d)[0]
        return rx * np.exp(-self.params.beta * np.abs(t - self.t) ** self.params.d)

    def basis_at(self, x: np.ndarray, t: float) -> np.ndarray:
        xn = _unit(self.design, np.reshape(x, (1, -1)))[0]
        return _basis_row(self.basis, xn, t)


@dataclass
class DenseFit:
    system: DenseSystem
    mu: np.ndarray
    sigma2: float
    value: float

    @property
    def params(self) -> CorrParams:
        return self.system.params


def _check_cap(N: int, cap: int, what: str) -> None:
    if N > cap:
        raise SizeCapExceeded(f"{what}: N={N} exceeds the dense cap {cap}")


def solve_system(system: DenseSystem) -> DenseFit:
    """GLS mean, profiled variance and N log sigma2 + log|R| by a dense Cholesky."""
    L = linalg.cholesky(system.R, lower=True)
    Rinv_V = linalg.cho_solve((L, True), system.V)
    Rinv_y = linalg.cho_solve((L, True), system.y)
    mu = np.linalg.solve(system.V.T @ Rinv_V, system.V.T @ Rinv_y)
    resid = system.y - system.V @ mu
    sigma2 = float(resid @ linalg.cho_solve((L, True), resid)) / system.N
    value = system.N * np.log(max(sigma2, np.finfo(float).tiny)) + 2.0 * np.sum(np.log(np.diag(L)))
    return DenseFit(system=system, mu=mu, sigma2=sigma2, value=float(value))


def dense_neg_loglik(dataset: FunctionalDataset, basis: BasisSpec, params: CorrParams,
                     cap: Optional[int] = None) -> float:
    """N log sigma2_hat + log|R| on the full correlation matrix."""
    cap = settings.benchmark_dense_cap if cap is None else cap
    _check_cap(dataset.total_points, cap, "dense likelihood")
    return solve_system(DenseSystem.from_dataset(dataset, basis, params)).value


def dense_model(dataset: FunctionalDataset, basis: BasisSpec, params: CorrParams) -> DenseFit:
    """Dense counterpart of build_model at fixed correlation parameters."""
    _check_cap(dataset.total_points, settings.benchmark_dense_cap, "dense model")
    return solve_system(DenseSystem.from_dataset(dataset, basis, params))


def dense_fit(dataset: FunctionalDataset, basis: BasisSpec, init: CorrParams,
              opts: Optional[FitOptions] = None) -> DenseFit:
    """
    Multi-start Nelder-Mead on the dense likelihood, started like the Kronecker fit.

    Raises:
        SizeCapExceeded: more observations than the dense fit cap
    """
    opts = opts or FitOptions()
    N = dataset.total_points
    _check_cap(N, settings.dense_fit_cap, "dense fit")
    if N == 1:
        system = DenseSystem.from_dataset(dataset, basis, init)
        mu = np.zeros(basis.size)
        mu[0] = system.y[0]
        return DenseFit(system=system, mu=mu, sigma2=0.0, value=float("-inf"))

    fit_alpha = dataset.n > 1 and dataset.design.p > 0
    fit_beta = dataset.union_grid.size > 1

    def to_params(v: np.ndarray) -> CorrParams:
        v = np.clip(v, -LOG_BOUND, LOG_BOUND)
        alphas = np.exp(v[:init.p]) if fit_alpha else init.alphas
        beta = float(np.exp(v[-1])) if fit_beta else init.beta
        return CorrParams(alphas=alphas, beta=beta, d=init.d, nugget=init.nugget)

    def objective(v: np.ndarray) -> float:
        try:
            return solve_system(DenseSystem.from_dataset(dataset, basis, to_params(v))).value
        except (linalg.LinAlgError, np.linalg.LinAlgError):
            return float("inf")

    parts = []
    if fit_alpha:
        parts.append(np.log(np.maximum(init.alphas, np.finfo(float).tiny)))
    if fit_beta:
        parts.append([np.log(max(init.beta, np.finfo(float).tiny))])
    x0 = np.clip(np.concatenate(parts), -LOG_BOUND, LOG_BOUND) if parts else np.zeros(0)
    if x0.size == 0:
        return solve_system(DenseSystem.from_dataset(dataset, basis, init))

    rng = opts.rng()
    starts = [x0] + [np.clip(x0 + rng.uniform(-1.0, 1.0, x0.size), -LOG_BOUND, LOG_BOUND)
                     for _ in range(opts.n_restarts)]
    best = None
    for start in starts:
        result = optimize.minimize(objective, start, method="Nelder-Mead",
                                   options={"maxfev": opts.max_evals, "xatol": opts.xatol, "fatol": opts.fatol})
        if np.isfinite(result.fun) and (best is None or result.fun < best.fun):
            best = result
    params = to_params(best.x) if best is not None else init
    return solve_system(DenseSystem.from_dataset(dataset, basis, params))


def dense_predict(fit: DenseFit, x: np.ndarray, t: float) -> float:
    """v(x,t)' mu + r' R^-1 (y - V mu)."""
    system = fit.system
    r = system.cross(x, t)
    resid = system.y - system.V @ fit.mu
    return float(system.basis_at(x, t) @ fit.mu + r @ np.linalg.solve(system.R, resid))


def dense_ci(fit: DenseFit, x: np.ndarray, t: float, kappa: float = 0.05) -> Tuple[float, float]:
    """Plug-in interval with variance sigma2 (1 - r'R^-1 r + h'(V'R^-1V)^-1 h)."""
    system = fit.system
    r = system.cross(x, t)
    Rinv = np.linalg.inv(system.R)
    h = system.basis_at(x, t) - system.V.T @ Rinv @ r
    bracket = 1.0 - r @ Rinv @ r + h @ np.linalg.solve(system.V.T @ Rinv @ system.V, h)
    half = norm.ppf(1.0 - kappa / 2.0) * np.sqrt(fit.sigma2 * max(bracket, 0.0))
    center = dense_predict(fit, x, t)
    return center - half, center + half


def dense_conditional_mean(dataset: FunctionalDataset, mu: np.ndarray, sigma2: float, params: CorrParams,
                           basis: BasisSpec, grid: Optional[np.ndarray] = None
                           ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact conditional mean and covariance of every unobserved grid cell.

    Returns:
        (mean, covariance, flat run-major indices of the missing cells)

    Raises:
        SizeCapExceeded: n * m above the conditional cap
    """
    grid = dataset.union_grid if grid is None else np.asarray(grid, dtype=float)
    n, m = dataset.n, grid.size
    _check_cap(n * m, settings.dense_conditional_cap, "dense conditional mean")
    runs = np.repeat(np.arange(n), m)
    t = np.tile(grid, n)
    system = DenseSystem.build(dataset.design, basis, params, runs, t, np.zeros(n * m), grid)
    mean = system.V @ np.asarray(mu, dtype=float)
    cov = sigma2 * system.R

    observed = np.zeros(n * m, dtype=bool)
    values = np.zeros(n * m)
    for i, run in enumerate(dataset.runs):
        idx = i * m + np.searchsorted(grid, run.t)
        observed[idx] = True
        values[idx] = run.y
    o = np.flatnonzero(observed)
    miss = np.flatnonzero(~observed)
    if miss.size == 0:
        return np.zeros(0), np.zeros((0, 0)), miss
    if o.size == 0:
        return mean[miss], cov[np.ix_(miss, miss)], miss
    S_oo = cov[np.ix_(o, o)]
    S_mo = cov[np.ix_(miss, o)]
    cond_mean = mean[miss] + S_mo @ np.linalg.solve(S_oo, values[o] - mean[o])
    cond_cov = cov[np.ix_(miss, miss)] - S_mo @ np.linalg.solve(S_oo, S_mo.T)
    return cond_mean, 0.5 * (cond_cov + cond_cov.T), miss
