"""
Kronecker Kriging Module
Universal kriging on regular-grid functional data: GLS mean, profiled variance,
profile likelihood, multi-start Nelder-Mead fit, prediction and confidence
intervals, all through R_X kron R_t solves.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.stats import norm

from config.settings import settings
from src.kriging.corr import (
    CholeskyFactor,
    CorrParams,
    Design,
    StructuredCorrT,
    build_R_t,
    build_R_x,
    cross_corr_x,
    is_equally_spaced,
    kron_apply_inverse,
    logdet_kron,
)
from src.kriging.dataset import FunctionalDataset
from src.utils.errors import DataError, DimensionMismatch, OptimFailed, RankDeficientBasis, SingularMatrix

logger = logging.getLogger(__name__)

LOG_RATE_BOUND = 8.0
SIGMA2_FLOOR = np.finfo(float).tiny
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    """
    Mean basis v(x, t) = (1, k(t), g(x)).

    Columns are ordered intercept, then t powers in declared order, then
    (variable, power) x monomials in declared order. t enters as
    (t - t_offset) / t_scale and x on the design's [0, 1] rescaling.
    """
    t_terms: Tuple[int, ...] = ()
    x_terms: Tuple[Tuple[int, int], ...] = ()
    t_offset: float = 0.0
    t_scale: float = 1.0

    def __post_init__(self):
        t_terms = tuple(int(p) for p in self.t_terms)
        x_terms = tuple((int(k), int(p)) for k, p in self.x_terms)
        if any(p < 1 for p in t_terms) or any(p < 1 or k < 0 for k, p in x_terms):
            raise ValueError("Basis powers must be >= 1 and variable indices >= 0")
        if len(set(t_terms)) != len(t_terms) or len(set(x_terms)) != len(x_terms):
            raise ValueError(f"Duplicate basis terms: t={t_terms}, x={x_terms}")
        if not self.t_scale > 0:
            raise ValueError(f"t_scale must be positive, got {self.t_scale}")
        object.__setattr__(self, "t_terms", t_terms)
        object.__setattr__(self, "x_terms", x_terms)

    @classmethod
    def for_grid(cls, grid: np.ndarray, t_terms: Sequence[int] = (),
                 x_terms: Sequence[Tuple[int, int]] = ()) -> "BasisSpec":
        grid = np.asarray(grid, dtype=float)
        span = float(grid[-1] - grid[0]) if grid.size > 1 else 0.0
        return cls(t_terms=tuple(t_terms), x_terms=tuple(x_terms),
                   t_offset=float(grid[0]) if grid.size else 0.0, t_scale=span if span > 0 else 1.0)

    @property
    def size(self) -> int:
        return 1 + len(self.t_terms) + len(self.x_terms)

    def with_terms(self, t_terms: Optional[Sequence[int]] = None,
                   x_terms: Optional[Sequence[Tuple[int, int]]] = None) -> "BasisSpec":
        return BasisSpec(
            t_terms=self.t_terms if t_terms is None else tuple(t_terms),
            x_terms=self.x_terms if x_terms is None else tuple(x_terms),
            t_offset=self.t_offset,
            t_scale=self.t_scale,
        )

    def labels(self, names: Optional[Sequence[str]] = None) -> List[str]:
        out = ["1"] + [f"t^{p}" for p in self.t_terms]
        for k, p in self.x_terms:
            name = names[k] if names is not None else f"x{k + 1}"
            out.append(f"{name}^{p}")
        return out

    def check_design(self, design: Design) -> None:
        for k, _ in self.x_terms:
            if k >= design.p:
                raise DimensionMismatch(f"Basis term uses variable {k + 1} but the design has {design.p}")

    def t_part(self, t: np.ndarray) -> np.ndarray:
        u = (np.atleast_1d(np.asarray(t, dtype=float)) - self.t_offset) / self.t_scale
        if not self.t_terms:
            return np.zeros((u.size, 0))
        return np.stack([u ** p for p in self.t_terms], axis=1)

    def x_part(self, xs: np.ndarray) -> np.ndarray:
        """x monomials from already rescaled settings (k, p)."""
        xs = np.asarray(xs, dtype=float)
        if not self.x_terms:
            return np.zeros((xs.shape[0], 0))
        return np.stack([xs[:, k] ** p for k, p in self.x_terms], axis=1)

    def rows(self, xs: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Run-major basis matrix (k*l, size) for rescaled settings xs and abscissae t."""
        tp = self.t_part(t)
        xp = self.x_part(xs)
        k, l = xp.shape[0], tp.shape[0]
        kt = tp.shape[1]
        V = np.empty((k, l, self.size))
        V[:, :, 0] = 1.0
        V[:, :, 1:1 + kt] = tp[None, :, :]
        V[:, :, 1 + kt:] = xp[:, None, :]
        return V.reshape(k * l, self.size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t_terms": list(self.t_terms),
            "x_terms": [list(term) for term in self.x_terms],
            "t_offset": self.t_offset,
            "t_scale": self.t_scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BasisSpec":
        return cls(t_terms=tuple(data["t_terms"]), x_terms=tuple(tuple(term) for term in data["x_terms"]),
                   t_offset=data["t_offset"], t_scale=data["t_scale"])


@dataclass
class FitOptions:
    """Likelihood optimizer options."""
    n_restarts: int = 5
    seed: Optional[int] = None
    max_evals: int = 2000
    xatol: float = 1e-8
    fatol: float = 1e-10
    refit: bool = False
    kappa: float = 0.05

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(settings.default_seed if self.seed is None else self.seed)


def effective_t_nugget(grid: np.ndarray, params: CorrParams) -> float:
    """Nugget used on R_t: none when the closed-form AR(1) path applies."""
    if params.d == 1 and is_equally_spaced(grid):
        return 0.0
    return params.nugget


# ----------------------------------------------------------------------
# GLS pieces
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class GLSFit:
    mu: np.ndarray
    normal: CholeskyFactor
    weighted_basis: np.ndarray


def _gls(y: np.ndarray, V: np.ndarray, Rx: CholeskyFactor, Rt: StructuredCorrT) -> GLSFit:
    RinvV = kron_apply_inverse(Rx, Rt, V)
    normal = V.T @ RinvV
    normal = 0.5 * (normal + normal.T)
    eig = np.linalg.eigvalsh(normal)
    if eig[0] <= RANK_RTOL * max(eig[-1], 0.0):
        raise RankDeficientBasis(f"GLS normal matrix is singular (eigenvalues {eig[0]:.3e} .. {eig[-1]:.3e})")
    try:
        chol = CholeskyFactor.of(normal, what="GLS normal matrix")
    except SingularMatrix as exc:
        raise RankDeficientBasis(str(exc))
    mu = chol.solve(RinvV.T @ y)
    return GLSFit(mu=mu, normal=chol, weighted_basis=RinvV)


def gls_mu(y: np.ndarray, V: np.ndarray, Rx: CholeskyFactor, Rt: StructuredCorrT) -> np.ndarray:
    """
    Generalized least-squares mean coefficients.

    Args:
        y: Run-major response vector (n*m,)
        V: Basis matrix (n*m, L)
        Rx: Factorized design correlation
        Rt: Functional-index correlation structure

    Returns:
        Coefficient vector of length L
    """
    return _gls(np.asarray(y, dtype=float), np.asarray(V, dtype=float), Rx, Rt).mu


def sigma2_hat(y: np.ndarray, V: np.ndarray, mu: np.ndarray, Rx: CholeskyFactor, Rt: StructuredCorrT) -> float:
    """Profiled process variance (1/N) r' (R_X^-1 kron R_t^-1) r with r = y - V mu."""
    resid = np.asarray(y, dtype=float) - np.asarray(V, dtype=float) @ mu
    quad = float(resid @ kron_apply_inverse(Rx, Rt, resid))
    return max(quad, 0.0) / resid.size


def scatter_quadratic(devs: np.ndarray, Rx: CholeskyFactor, Rt: StructuredCorrT) -> float:
    """Mean of dev' R^-1 dev over the rows of devs (q, N)."""
    devs = np.atleast_2d(devs)
    solved = kron_apply_inverse(Rx, Rt, devs.T)
    return float(np.sum(devs.T * solved)) / devs.shape[0]


@dataclass(frozen=True)
class ProfileFit:
    """Profile likelihood evaluated at one CorrParams."""
    value: float
    mu: np.ndarray
    sigma2: float
    Rx: CholeskyFactor
    Rt: StructuredCorrT
    gls: GLSFit
    weights: np.ndarray


def profile_fit(design: Design, grid: np.ndarray, Y: np.ndarray, basis: BasisSpec, params: CorrParams,
                scatter_devs: Optional[np.ndarray] = None, force_dense: bool = False) -> ProfileFit:
    """
    Profile objective N log sigma2 + m log|R_X| + n log|R_t| with mu, sigma2 at their GLS values.

    scatter_devs (q, N) adds the Monte-Carlo scatter of sampled completions
    to the variance numerator. force_dense factorizes R_t by Cholesky even
    when the closed form applies.
    """
    Y = np.asarray(Y, dtype=float)
    n, m = design.n, np.asarray(grid).size
    if Y.shape != (n, m):
        raise DimensionMismatch(f"Response matrix {Y.shape} does not match ({n}, {m})")
    basis.check_design(design)
    Rx = build_R_x(design, params)
    Rt = build_R_t(grid, params.beta, params.d, effective_t_nugget(grid, params), force_dense)
    V = basis.rows(design.scaled(), grid)
    y = Y.reshape(-1)
    gls = _gls(y, V, Rx, Rt)
    resid = y - V @ gls.mu
    weights = kron_apply_inverse(Rx, Rt, resid)
    quad = max(float(resid @ weights), 0.0)
    if scatter_devs is not None:
        quad += scatter_quadratic(scatter_devs, Rx, Rt)
    N = n * m
    sigma2 = quad / N
    value = N * np.log(max(sigma2, SIGMA2_FLOOR)) + logdet_kron(Rx, Rt, n, m)
    return ProfileFit(value=float(value), mu=gls.mu, sigma2=sigma2, Rx=Rx, Rt=Rt, gls=gls,
                      weights=weights.reshape(n, m))


def neg_profile_loglik(params: CorrParams, dataset: FunctionalDataset, basis: BasisSpec) -> float:
    """Profile negative log-likelihood (up to constants) of a regular-grid dataset."""
    if not dataset.is_regular:
        raise DataError("profile likelihood needs a regular grid; complete the data first")
    return profile_fit(dataset.design, dataset.union_grid, dataset.matrix(), basis, params).value


# ----------------------------------------------------------------------
# Fitted model
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class KrigingModel:
    """Fitted universal kriging model on a regular grid with cached Kronecker factors."""
    basis: BasisSpec
    mu: np.ndarray
    sigma2: float
    params: CorrParams
    design: Design
    grid: np.ndarray
    Y: np.ndarray
    neg_loglik: float
    Rx: CholeskyFactor = field(repr=False)
    Rt: StructuredCorrT = field(repr=False)
    weights: np.ndarray = field(repr=False)
    weighted_basis: np.ndarray = field(repr=False)
    normal: CholeskyFactor = field(repr=False)

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def m(self) -> int:
        return self.grid.size

    def _settings(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim < 2:
            x = x.reshape(1, self.design.p)
        return x

    def is_extrapolation(self, x: np.ndarray, t: float) -> bool:
        outside_t = t < self.grid[0] or t > self.grid[-1]
        return bool(outside_t or not self.design.contains(x))

    def trend_profiles(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        X = self._settings(X)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        V = self.basis.rows(self.design.scale_points(X), t)
        return (V @ self.mu).reshape(X.shape[0], t.size)

    def predict_profiles(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Predictions (k, l) for every setting in X at every abscissa in t."""
        X = self._settings(X)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        rx = cross_corr_x(self.design, self.params, X)
        rt = self.Rt.cross(t)
        return self.trend_profiles(X, t) + rx @ self.weights @ rt.T

    def predict_profile(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.predict_profiles(x, t)[0]

    def predict_points(self, X: np.ndarray, T: np.ndarray) -> np.ndarray:
        """Predictions at paired (X[k], T[k])."""
        X = self._settings(X)
        T = np.atleast_1d(np.asarray(T, dtype=float))
        rx = cross_corr_x(self.design, self.params, X)
        rt = self.Rt.cross(T)
        V = self._paired_basis(X, T)
        return V @ self.mu + np.einsum("kn,nm,km->k", rx, self.weights, rt)

    def predict(self, x: np.ndarray, t: float) -> float:
        """Kriging predictor at one (x, t)."""
        if self.is_extrapolation(x, t):
            logger.debug(f"Extrapolating at x={np.ravel(x)}, t={t}")
        return float(self.predict_points(x, [t])[0])

    def _paired_basis(self, X: np.ndarray, T: np.ndarray) -> np.ndarray:
        xs = self.design.scale_points(X)
        return np.hstack([np.ones((T.size, 1)), self.basis.t_part(T), self.basis.x_part(xs)])

    def predict_ci_points(self, X: np.ndarray, T: np.ndarray, kappa: float = 0.05
                          ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Plug-in confidence intervals at paired points.

        Half-width is z_{1-kappa/2} sigma {1 - r'R^-1 r + h'(V'R^-1 V)^-1 h}^{1/2}
        with h = v - V'R^-1 r; the bracket is clamped at zero.

        Returns:
            (prediction, lower, upper) arrays
        """
        if not 0 < kappa < 1:
            raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
        X = self._settings(X)
        T = np.atleast_1d(np.asarray(T, dtype=float))
        rx = cross_corr_x(self.design, self.params, X)
        rt = self.Rt.cross(T)
        q_x = np.sum(rx.T * self.Rx.solve(rx.T), axis=0)
        q_t = np.sum(rt.T * self.Rt.solve(rt.T), axis=0)
        V = self._paired_basis(X, T)
        h = V - np.einsum("nml,kn,km->kl", self.weighted_basis, rx, rt)
        h_term = np.sum(h.T * self.normal.solve(h.T), axis=0)
        bracket = np.maximum(1.0 - q_x * q_t + h_term, 0.0)
        half = norm.ppf(1.0 - kappa / 2.0) * np.sqrt(self.sigma2 * bracket)
        y_hat = V @ self.mu + np.einsum("kn,nm,km->k", rx, self.weights, rt)
        return y_hat, y_hat - half, y_hat + half

    def predict_ci(self, x: np.ndarray, t: float, kappa: float = 0.05) -> Tuple[float, float]:
        _, lo, hi = self.predict_ci_points(x, [t], kappa)
        return float(lo[0]), float(hi[0])

    def predict_profile_ci(self, x: np.ndarray, t: np.ndarray, kappa: float = 0.05
                           ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        X = np.repeat(self._settings(x), t.size, axis=0)
        return self.predict_ci_points(X, t, kappa)

    def loo_residuals(self) -> np.ndarray:
        """
        Closed-form leave-one-point-out residuals (n, m) at fixed correlation.

        Uses e = (Q y) / diag(Q) with Q = R^-1 - R^-1 V (V'R^-1 V)^-1 V'R^-1;
        Q y is the cached weight vector.
        """
        diag_inv = np.kron(np.diag(self.Rx.inverse()), np.diag(self.Rt.inverse()))
        W = self.weighted_basis.reshape(-1, self.mu.size)
        diag_q = diag_inv - np.sum(W.T * self.normal.solve(W.T), axis=0)
        diag_q = np.where(diag_q > 0, diag_q, np.nan)
        return (self.weights.reshape(-1) / diag_q).reshape(self.n, self.m)

    def loo_rmse(self) -> float:
        resid = self.loo_residuals()
        if self.n * self.m <= self.mu.size or not np.all(np.isfinite(resid)):
            return float("inf")
        return float(np.sqrt(np.mean(resid ** 2)))

    def summary(self) -> Dict[str, Any]:
        return {
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2,
            "alphas": self.params.alphas.tolist(),
            "beta": self.params.beta,
            "neg_loglik": self.neg_loglik,
        }


def build_model(design: Design, grid: np.ndarray, Y: np.ndarray, basis: BasisSpec, params: CorrParams,
                scatter_devs: Optional[np.ndarray] = None) -> KrigingModel:
    """Model at fixed correlation parameters; mu and sigma2 from their GLS estimates."""
    grid = np.asarray(grid, dtype=float)
    Y = np.asarray(Y, dtype=float)
    fit = profile_fit(design, grid, Y, basis, params, scatter_devs)
    n, m = design.n, grid.size
    return KrigingModel(
        basis=basis,
        mu=fit.mu,
        sigma2=max(fit.sigma2, SIGMA2_FLOOR),
        params=params,
        design=design,
        grid=grid,
        Y=Y,
        neg_loglik=fit.value,
        Rx=fit.Rx,
        Rt=fit.Rt,
        weights=fit.weights,
        weighted_basis=fit.gls.weighted_basis.reshape(n, m, basis.size),
        normal=fit.gls.normal,
    )


# ----------------------------------------------------------------------
# Fitting
# ----------------------------------------------------------------------

def fit_grid(design: Design, grid: np.ndarray, Y: np.ndarray, basis: BasisSpec, init: CorrParams,
             opts: Optional[FitOptions] = None, scatter_devs: Optional[np.ndarray] = None) -> KrigingModel:
    """
    Minimize the profile objective over log-rates with multi-start Nelder-Mead.

    Rates without information are held at init: alphas when n = 1 or p = 0,
    beta when m = 1. Starts are init plus n_restarts uniform +-1 perturbations
    in log space; log-rates are clipped to [-8, 8].

    Raises:
        OptimFailed: every start failed to factorize
    """
    opts = opts or FitOptions()
    grid = np.asarray(grid, dtype=float)
    fit_alpha = design.n > 1 and design.p > 0
    fit_beta = grid.size > 1

    def to_params(log_rates: np.ndarray) -> CorrParams:
        return init.from_log_vector(np.clip(log_rates, -LOG_RATE_BOUND, LOG_RATE_BOUND), fit_alpha, fit_beta)

    def objective(log_rates: np.ndarray) -> float:
        try:
            return profile_fit(design, grid, Y, basis, to_params(log_rates), scatter_devs).value
        except SingularMatrix:
            return float("inf")

    x0 = np.clip(init.log_vector(fit_alpha, fit_beta), -LOG_RATE_BOUND, LOG_RATE_BOUND)
    if x0.size == 0:
        return build_model(design, grid, Y, basis, init, scatter_devs)

    rng = opts.rng()
    starts = [x0] + [np.clip(x0 + rng.uniform(-1.0, 1.0, x0.size), -LOG_RATE_BOUND, LOG_RATE_BOUND)
                     for _ in range(opts.n_restarts)]

    def run_start(start: np.ndarray) -> Tuple[float, np.ndarray]:
        result = optimize.minimize(
            objective, start, method="Nelder-Mead",
            options={"maxfev": opts.max_evals, "xatol": opts.xatol, "fatol": opts.fatol},
        )
        return float(result.fun), np.clip(result.x, -LOG_RATE_BOUND, LOG_RATE_BOUND)

    if settings.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            outcomes = list(pool.map(run_start, starts))
    else:
        outcomes = [run_start(start) for start in starts]

    for k, (value, point) in enumerate(outcomes):
        logger.debug(f"Start {k}: objective {value:.6f} at log-rates {np.round(point, 4).tolist()}")

    finite = [(value, point) for value, point in outcomes if np.isfinite(value)]
    if not finite:
        raise OptimFailed(f"All {len(starts)} optimizer starts failed to factorize", best=init)
    best_value, best_point = min(finite, key=lambda pair: pair[0])
    params = to_params(best_point)
    logger.debug(f"Best objective {best_value:.6f}: alphas={params.alphas.tolist()}, beta={params.beta:.6g}")
    return build_model(design, grid, Y, basis, params, scatter_devs)


def fit_regular(dataset: FunctionalDataset, basis: BasisSpec, init: CorrParams,
                opts: Optional[FitOptions] = None) -> KrigingModel:
    """Fit the kriging model to a regular-grid dataset."""
    if not dataset.is_regular:
        raise DataError("fit_regular needs a regular grid; use EM completion for irregular data")
    logger.info(f"🚀 Fitting kriging model: n={dataset.n}, m={dataset.union_grid.size}, basis={basis.labels()}")
    model = fit_grid(dataset.design, dataset.union_grid, dataset.matrix(), basis, init, opts)
    logger.info(f"✅ Fit done: beta={model.params.beta:.4g}, sigma2={model.sigma2:.4g}, "
                f"objective={model.neg_loglik:.4f}")
    return model


@dataclass(frozen=True)
class LooProfile:
    """Leave-one-out prediction of one run over the grid."""
    run: int
    t: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def mse(self) -> float:
        return float(np.mean((self.y_hat - self.y) ** 2))


def loo_profile(dataset: FunctionalDataset, basis: BasisSpec, opts: FitOptions, i: int,
                model: Optional[KrigingModel] = None) -> LooProfile:
    """
    Predict run i from the other runs.

    With opts.refit the correlation parameters are re-estimated without run i;
    otherwise the full-data parameters are kept and only mu, sigma2 are re-estimated.
    """
    if dataset.n < 3:
        raise DataError(f"leave-one-out needs at least 3 runs, got {dataset.n}")
    if model is None:
        model = fit_regular(dataset, basis, CorrParams(alphas=np.ones(dataset.design.p), beta=1.0), opts)
    train = dataset.without(i)
    if opts.refit:
        reduced = fit_grid(train.design, dataset.union_grid, train.matrix(dataset.union_grid), basis,
                           model.params, opts)
    else:
        reduced = build_model(train.design, dataset.union_grid, train.matrix(dataset.union_grid), basis,
                              model.params)
    run = dataset.runs[i]
    y_hat, lo, hi = reduced.predict_profile_ci(dataset.design.rows[i], run.t, opts.kappa)
    return LooProfile(run=i, t=run.t, y=run.y, y_hat=y_hat, lo=lo, hi=hi)
