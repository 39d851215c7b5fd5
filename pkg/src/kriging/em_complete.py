"""
EM Completion Module
Completes irregular-grid functional data onto the union grid. Each run's
missing block is updated from three Gaussians (prior, own profile, other runs)
with Gauss-Seidel conditional-expectation sweeps or Gibbs draws; the M-step
refits the Kronecker kriging model on the completed matrix.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.kriging.corr import (
    CholeskyFactor,
    CorrParams,
    build_R_t,
    build_R_x,
    corr_t,
    downdate_Rx_inverse,
    kron_apply_inverse,
    logdet_kron,
)
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, FitOptions, KrigingModel, build_model, effective_t_nugget, fit_grid
from src.utils.errors import MaxIterReached, NotPositiveDefinite, SingularMatrix

logger = logging.getLogger(__name__)

PSD_FLOOR = 1e-8
POWER_STEPS = 100
POWER_TOL = 1e-8


class EMMode(str, Enum):
    EXPECTATION = "expectation"
    SAMPLING = "sampling"


@dataclass(frozen=True)
class Theta:
    """Parameter iterate (mu, sigma2, correlation parameters)."""
    mu: np.ndarray
    sigma2: float
    params: CorrParams

    @classmethod
    def from_model(cls, model: KrigingModel) -> "Theta":
        return cls(mu=model.mu.copy(), sigma2=model.sigma2, params=model.params)

    def vector(self) -> np.ndarray:
        """Flat (mu, sigma2, alphas, beta) used by the termination rule."""
        return np.concatenate([self.mu, [self.sigma2], self.params.alphas, [self.params.beta]])

    def to_dict(self) -> Dict[str, Any]:
        return {"mu": self.mu.tolist(), "sigma2": self.sigma2, **self.params.to_dict()}


@dataclass(frozen=True)
class RunConditional:
    """Gaussian over one run's grid vector; `observed` lists coordinates fixed by data."""
    zeta: np.ndarray
    Sigma: np.ndarray
    which: str
    observed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        Sigma = 0.5 * (self.Sigma + self.Sigma.T)
        _check_psd(Sigma, f"{self.which} covariance")
        object.__setattr__(self, "Sigma", Sigma)


def _check_psd(matrix: np.ndarray, what: str) -> None:
    if matrix.size == 0:
        return
    w = np.linalg.eigvalsh(matrix)
    floor = -PSD_FLOOR * max(float(np.trace(matrix)), 0.0)
    if w[0] < floor:
        raise NotPositiveDefinite(f"{what}: smallest eigenvalue {w[0]:.3e} below floor {floor:.3e}")


def _condition(zeta: np.ndarray, Sigma: np.ndarray, observed: np.ndarray, y_obs: np.ndarray
               ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Condition N(zeta, Sigma) on the coordinates `observed` taking the values y_obs.

    Returns:
        (mean, covariance, gain) on all coordinates; gain is Sigma[:, O] Sigma[O, O]^-1
    """
    if observed.size == 0:
        return zeta.copy(), Sigma.copy(), np.zeros((zeta.size, 0))
    chol = CholeskyFactor.of(Sigma[np.ix_(observed, observed)], what="observed-block covariance")
    cross = Sigma[:, observed]
    gain = chol.solve(cross.T).T
    mean = zeta + gain @ (y_obs - zeta[observed])
    cov = Sigma - gain @ cross.T
    mean[observed] = y_obs
    cov[observed, :] = 0.0
    cov[:, observed] = 0.0
    return mean, 0.5 * (cov + cov.T), gain


def _precision(Sigma: np.ndarray, what: str) -> np.ndarray:
    try:
        return CholeskyFactor.of(Sigma, what=what).inverse()
    except SingularMatrix as exc:
        raise NotPositiveDefinite(str(exc))


@dataclass(frozen=True)
class _Combined:
    eta: np.ndarray
    gamma: np.ndarray
    missing: np.ndarray
    others_precision: np.ndarray
    others_gain: np.ndarray


def _combine(prior: RunConditional, own: RunConditional, others: RunConditional) -> _Combined:
    observed = own.observed
    y_obs = own.zeta[observed]
    missing = np.setdiff1d(np.arange(prior.zeta.size), observed)

    p_mean, p_cov, _ = _condition(prior.zeta, prior.Sigma, observed, y_obs)
    q_mean, q_cov, q_gain = _condition(others.zeta, others.Sigma, observed, y_obs)
    block = np.ix_(missing, missing)

    P_prior = _precision(p_cov[block], "prior missing block")
    P_own = _precision(own.Sigma[block], "own-profile missing block")
    P_others = _precision(q_cov[block], "other-runs missing block")

    # own and prior agree on the missing block once both are conditioned on y_i
    own_term = P_own - P_prior
    P = P_others + own_term
    P = 0.5 * (P + P.T)
    _check_psd(P, "combined precision")
    h = P_others @ q_mean[missing] + (P_own @ own.zeta[missing] - P_prior @ p_mean[missing])
    try:
        gamma = CholeskyFactor.of(P, what="combined precision").inverse()
    except SingularMatrix as exc:
        raise NotPositiveDefinite(str(exc))
    return _Combined(eta=gamma @ h, gamma=gamma, missing=missing, others_precision=P_others,
                     others_gain=q_gain[missing])


def posterior_combine(prior: RunConditional, own: RunConditional, others: RunConditional
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Full conditional of a run's missing block given its own data and the other runs.

    The three Gaussians are first conditioned on the run's observed values,
    then combined through Gamma = (P_others + P_own - P_prior)^-1 and
    eta = Gamma (P_others z_others + P_own z_own - P_prior z_prior).

    Returns:
        (eta, Gamma) over the missing coordinates in grid order

    Raises:
        NotPositiveDefinite: the precision combination fails its eigenvalue floor
    """
    combined = _combine(prior, own, others)
    return combined.eta, combined.gamma


def draw_gaussian(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mean, cov) through the symmetric square root of cov."""
    return mean + _sqrt_psd(cov) @ rng.standard_normal(mean.size)


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


# ----------------------------------------------------------------------
# Conditionals at a fixed theta
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class _RunSystem:
    """Affine update z_i = const + transfer @ u for run i at fixed theta."""
    missing: np.ndarray
    others: np.ndarray
    d: np.ndarray
    const: np.ndarray
    transfer: np.ndarray
    gamma: np.ndarray
    root: np.ndarray


class ConditionalModel:
    """Quantities shared by every run conditional at one theta."""

    def __init__(self, theta: Theta, dataset: FunctionalDataset, basis: BasisSpec, grid: np.ndarray):
        self.theta = theta
        self.dataset = dataset
        self.grid = np.asarray(grid, dtype=float)
        params = theta.params
        self.Rx = build_R_x(dataset.design, params)
        self.Rx_inv = self.Rx.inverse()
        self.Rt_matrix = corr_t(self.grid, self.grid, params.beta, params.d)
        self.Rt_matrix[np.diag_indices_from(self.Rt_matrix)] += effective_t_nugget(self.grid, params)
        V = basis.rows(dataset.design.scaled(), self.grid)
        self.zeta_c = (V @ theta.mu).reshape(dataset.n, self.grid.size)
        self.mask = dataset.observed_mask(self.grid)
        self.Y = dataset.matrix(self.grid)
        self._systems: Dict[int, Optional[_RunSystem]] = {}

    @property
    def n(self) -> int:
        return self.dataset.n

    def observed(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.mask[i])

    def prior(self, i: int) -> RunConditional:
        Sigma = self.theta.sigma2 * self.Rx.matrix[i, i] * self.Rt_matrix
        return RunConditional(zeta=self.zeta_c[i].copy(), Sigma=Sigma, which="prior")

    def own(self, i: int) -> RunConditional:
        prior = self.prior(i)
        observed = self.observed(i)
        if observed.size == 0:
            return RunConditional(zeta=prior.zeta, Sigma=prior.Sigma, which="own")
        mean, cov, _ = _condition(prior.zeta, prior.Sigma, observed, self.Y[i, observed])
        return RunConditional(zeta=mean, Sigma=cov, which="own", observed=observed)

    def weights(self, i: int) -> Tuple[np.ndarray, np.ndarray, float]:
        """
        Other-run weights for run i.

        Returns:
            (indices of the other runs, d = r' R_X(-i)^-1, residual scale of R_X[i, i])
        """
        others = np.array([k for k in range(self.n) if k != i], dtype=int)
        if others.size == 0:
            return others, np.zeros(0), float(self.Rx.matrix[i, i])
        r = self.Rx.matrix[i, others]
        d = r @ downdate_Rx_inverse(self.Rx_inv, i)
        return others, d, float(self.Rx.matrix[i, i] - d @ r)

    def others(self, i: int, c: np.ndarray) -> RunConditional:
        others, d, scale = self.weights(i)
        zeta = self.zeta_c[i] + d @ (c[others] - self.zeta_c[others])
        Sigma = self.theta.sigma2 * scale * self.Rt_matrix
        return RunConditional(zeta=zeta, Sigma=Sigma, which="others")

    def system(self, i: int) -> Optional[_RunSystem]:
        """Cached affine Gauss-Seidel update for run i (None when nothing is missing)."""
        if i not in self._systems:
            self._systems[i] = self._build_system(i)
        return self._systems[i]

    def _build_system(self, i: int) -> Optional[_RunSystem]:
        if self.mask[i].all():
            return None
        others, d, scale = self.weights(i)
        base = RunConditional(zeta=self.zeta_c[i].copy(), Sigma=self.theta.sigma2 * scale * self.Rt_matrix,
                              which="others")
        combined = _combine(self.prior(i), self.own(i), base)
        missing = combined.missing
        observed = self.observed(i)
        shift = np.zeros((missing.size, self.grid.size))
        shift[np.arange(missing.size), missing] = 1.0
        if observed.size:
            shift[:, observed] = -combined.others_gain
        transfer = combined.gamma @ combined.others_precision @ shift
        return _RunSystem(missing=missing, others=others, d=d, const=combined.eta, transfer=transfer,
                          gamma=combined.gamma, root=_sqrt_psd(combined.gamma))


def _context(theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
             grid: Optional[np.ndarray]) -> ConditionalModel:
    return ConditionalModel(theta, dataset, basis, dataset.union_grid if grid is None else grid)


def prior_conditional(i: int, theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
                      grid: Optional[np.ndarray] = None) -> RunConditional:
    """Prior of run i's grid vector: N(V_i mu, sigma2 R_X[i, i] R_t)."""
    return _context(theta, dataset, basis, grid).prior(i)


def own_profile_conditional(i: int, theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
                            grid: Optional[np.ndarray] = None) -> RunConditional:
    """Prior of run i conditioned on its own observations."""
    return _context(theta, dataset, basis, grid).own(i)


def others_conditional(i: int, c: np.ndarray, theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
                       grid: Optional[np.ndarray] = None) -> RunConditional:
    """Run i's grid vector given the other runs' completed rows of c (n x m)."""
    return _context(theta, dataset, basis, grid).others(i, np.asarray(c, dtype=float))


# ----------------------------------------------------------------------
# State and sweeps
# ----------------------------------------------------------------------

@dataclass
class EMState:
    """Completed matrix, current theta and the sweep/iteration history."""
    dataset: FunctionalDataset
    basis: BasisSpec
    grid: np.ndarray
    mask: np.ndarray
    c: np.ndarray
    theta: Theta
    k: int = 0
    q: int = 0
    param_deltas: List[float] = field(default_factory=list)
    sweep_deltas: List[float] = field(default_factory=list)
    _conditionals: Optional[ConditionalModel] = field(default=None, repr=False)

    @classmethod
    def initialize(cls, dataset: FunctionalDataset, basis: BasisSpec, theta: Theta,
                   z0: Optional[List[np.ndarray]] = None, grid: Optional[np.ndarray] = None) -> "EMState":
        """Observed values from the data, missing values from z0 (zeros when absent)."""
        grid = dataset.union_grid if grid is None else np.asarray(grid, dtype=float)
        mask = dataset.observed_mask(grid)
        c = dataset.matrix(grid, fill=0.0)
        if z0 is not None:
            for i, z in enumerate(z0):
                c[i, ~mask[i]] = z
        return cls(dataset=dataset, basis=basis, grid=grid, mask=mask, c=c, theta=theta)

    @property
    def has_missing(self) -> bool:
        return not bool(self.mask.all())

    def set_theta(self, theta: Theta) -> None:
        self.theta = theta
        self._conditionals = None

    def conditionals(self) -> ConditionalModel:
        if self._conditionals is None:
            self._conditionals = ConditionalModel(self.theta, self.dataset, self.basis, self.grid)
        return self._conditionals


def _sweep(state: EMState, rng: Optional[np.random.Generator]) -> float:
    ctx = state.conditionals()
    c = state.c
    delta = 0.0
    for i in range(state.dataset.n):
        system = ctx.system(i)
        if system is None:
            continue
        u = system.d @ (c[system.others] - ctx.zeta_c[system.others])
        z = system.const + system.transfer @ u
        if rng is not None:
            z = z + system.root @ rng.standard_normal(z.size)
        delta = max(delta, float(np.max(np.abs(z - c[i, system.missing]))))
        c[i, system.missing] = z
    state.q += 1
    state.sweep_deltas.append(delta)
    return delta


def ce_sweep(state: EMState) -> EMState:
    """One Gauss-Seidel pass i = 1..n replacing each missing block by its conditional mean."""
    _sweep(state, None)
    return state


def gibbs_sweep_sample(state: EMState, rng: Union[int, np.random.Generator]) -> EMState:
    """One Gibbs pass drawing each missing block from its full conditional."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    _sweep(state, rng)
    return state


def complete_data_nll(c: np.ndarray, theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
                      grid: np.ndarray) -> float:
    """-2 log-likelihood (without the 2 pi constant) of a completed matrix."""
    params = theta.params
    Rx = build_R_x(dataset.design, params)
    Rt = build_R_t(grid, params.beta, params.d, effective_t_nugget(grid, params))
    resid = np.asarray(c, dtype=float).reshape(-1) - basis.rows(dataset.design.scaled(), grid) @ theta.mu
    quad = float(resid @ kron_apply_inverse(Rx, Rt, resid))
    N = resid.size
    return N * np.log(theta.sigma2) + logdet_kron(Rx, Rt) + quad / theta.sigma2


@dataclass(frozen=True)
class EStepResult:
    c: np.ndarray
    samples: Optional[np.ndarray]
    q_value: float


def e_step(state: EMState, q: int, mode: EMMode = EMMode.EXPECTATION,
           rng: Optional[np.random.Generator] = None) -> EStepResult:
    """
    q sweeps at the current theta.

    Expectation mode returns the last sweep and its complete-data likelihood
    (plug-in surrogate); sampling mode returns the sample mean, the samples and
    the Monte-Carlo average of their likelihoods.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    mode = EMMode(mode)
    if mode == EMMode.EXPECTATION:
        for _ in range(q):
            ce_sweep(state)
        c = state.c.copy()
        value = complete_data_nll(c, state.theta, state.dataset, state.basis, state.grid)
        return EStepResult(c=c, samples=None, q_value=value)

    rng = rng if rng is not None else np.random.default_rng()
    samples = []
    for _ in range(q):
        gibbs_sweep_sample(state, rng)
        samples.append(state.c.copy())
    samples = np.stack(samples)
    value = float(np.mean([complete_data_nll(s, state.theta, state.dataset, state.basis, state.grid)
                           for s in samples]))
    c = samples.mean(axis=0)
    c[state.mask] = state.dataset.matrix(state.grid)[state.mask]
    return EStepResult(c=c, samples=samples, q_value=value)


@dataclass
class EMOptions:
    """
    EM driver options.

    `fit` drives every M-step and defaults to the fit_regular options, so regular
    data give the fit_regular model. M-steps warm-start at the previous theta;
    callers iterating on irregular data usually pass n_restarts=0.
    """
    q: int = 10
    delta: float = 0.05
    max_iter: int = 100
    mode: EMMode = EMMode.EXPECTATION
    seed: Optional[int] = None
    fix_correlation: bool = False
    strict: bool = False
    fit: FitOptions = field(default_factory=FitOptions)


def m_step(c: np.ndarray, basis: BasisSpec, theta_prev: Theta, dataset: FunctionalDataset, grid: np.ndarray,
           opts: Optional[EMOptions] = None, samples: Optional[np.ndarray] = None) -> Tuple[Theta, KrigingModel]:
    """
    Refit on the completed matrix, warm-started at theta_prev.

    With samples (q, n, m) the objective is the exact Monte-Carlo average of the
    complete-data likelihoods: GLS on the sample mean plus the sample scatter in sigma2.
    """
    opts = opts or EMOptions()
    scatter = None
    if samples is not None:
        scatter = (samples - samples.mean(axis=0)).reshape(samples.shape[0], -1)
    if opts.fix_correlation:
        model = build_model(dataset.design, grid, c, basis, theta_prev.params, scatter)
    else:
        model = fit_grid(dataset.design, grid, c, basis, theta_prev.params, opts.fit, scatter)
    return Theta.from_model(model), model


@dataclass
class EMDiagnostics:
    iterations: int
    converged: bool
    param_deltas: List[float]
    sweep_deltas: List[float]
    prop2: np.ndarray
    mode: EMMode
    q: int

    @property
    def final_delta(self) -> float:
        return self.param_deltas[-1] if self.param_deltas else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "param_deltas": list(self.param_deltas),
            "sweep_deltas": list(self.sweep_deltas),
            "prop2": self.prop2.tolist(),
            "mode": self.mode.value,
            "q": self.q,
        }


@dataclass
class EMResult:
    model: KrigingModel
    completed: np.ndarray
    theta: Theta
    diagnostics: EMDiagnostics
    mask: np.ndarray


def run_em(dataset: FunctionalDataset, basis: BasisSpec, theta0: Theta, z0: Optional[List[np.ndarray]] = None,
           opts: Optional[EMOptions] = None, grid: Optional[np.ndarray] = None) -> EMResult:
    """
    Alternate E- and M-steps until max |theta_new - theta_old| < delta.

    Regular data need a single M-step, which matches
    fit_regular(dataset, basis, theta0.params, opts.fit) unless fix_correlation
    is set. The returned model is fitted on the last completed matrix at the
    last theta.

    Raises:
        MaxIterReached: max_iter exhausted and opts.strict is set
    """
    opts = opts or EMOptions()
    state = EMState.initialize(dataset, basis, theta0, z0, grid)
    rng = np.random.default_rng(opts.seed if opts.seed is not None else opts.fit.seed)

    if not state.has_missing:
        theta, model = m_step(state.c, basis, theta0, dataset, state.grid, opts)
        diagnostics = EMDiagnostics(iterations=1, converged=True, param_deltas=[], sweep_deltas=[],
                                    prop2=np.zeros(dataset.n), mode=EMMode(opts.mode), q=opts.q)
        return EMResult(model=model, completed=state.c, theta=theta, diagnostics=diagnostics, mask=state.mask)

    missing = int((~state.mask).sum())
    logger.info(f"🚀 EM completion: n={dataset.n}, m={state.grid.size}, missing={missing}, "
                f"mode={EMMode(opts.mode).value}, q={opts.q}, delta={opts.delta}")
    converged = False
    completed = state.c.copy()
    model: Optional[KrigingModel] = None
    for k in range(1, opts.max_iter + 1):
        estep = e_step(state, opts.q, opts.mode, rng)
        theta, model = m_step(estep.c, basis, state.theta, dataset, state.grid, opts, estep.samples)
        change = float(np.max(np.abs(theta.vector() - state.theta.vector())))
        state.param_deltas.append(change)
        state.k = k
        state.set_theta(theta)
        completed = estep.c
        logger.debug(f"EM iteration {k}: max param change {change:.6g}, Q={estep.q_value:.6g}, "
                     f"last sweep delta {state.sweep_deltas[-1]:.3e}")
        if change < opts.delta:
            converged = True
            break

    diagnostics = EMDiagnostics(iterations=state.k, converged=converged, param_deltas=list(state.param_deltas),
                                sweep_deltas=list(state.sweep_deltas),
                                prop2=check_prop2(state.theta, dataset, basis, state.grid),
                                mode=EMMode(opts.mode), q=opts.q)
    result = EMResult(model=model, completed=completed, theta=state.theta, diagnostics=diagnostics,
                      mask=state.mask)
    if converged:
        logger.info(f"✅ EM converged after {state.k} iterations (max change {diagnostics.final_delta:.4g})")
    else:
        message = f"EM stopped at max_iter={opts.max_iter} with max change {diagnostics.final_delta:.4g}"
        if opts.strict:
            raise MaxIterReached(message, result=result)
        logger.warning(f"⚠️ {message}")
    return result


# ----------------------------------------------------------------------
# Contraction diagnostic
# ----------------------------------------------------------------------

def spectral_norm(B: np.ndarray, steps: int = POWER_STEPS, tol: float = POWER_TOL) -> float:
    """Largest singular value by power iteration on B'B."""
    if B.size == 0:
        return 0.0
    v = np.ones(B.shape[1]) / np.sqrt(B.shape[1])
    sigma = 0.0
    for _ in range(steps):
        w = B.T @ (B @ v)
        size = float(np.linalg.norm(w))
        if size == 0.0:
            return 0.0
        v = w / size
        estimate = float(np.sqrt(size))
        if abs(estimate - sigma) <= tol * max(estimate, 1.0):
            return estimate
        sigma = estimate
    return sigma


def check_prop2(theta: Theta, dataset: FunctionalDataset, basis: BasisSpec,
                grid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-run contraction value sum_k |d_k| ||A_i[:, M_i and M_k]||_2 on missing blocks,
    A_i = [I + S_others (S_own^-1 - S_prior^-1)]^-1.

    Values below 1 indicate the sweep map contracts; complete runs report 0.
    """
    ctx = _context(theta, dataset, basis, grid)
    values = np.zeros(dataset.n)
    for i in range(dataset.n):
        missing = np.flatnonzero(~ctx.mask[i])
        if missing.size == 0:
            continue
        block = np.ix_(missing, missing)
        others, d, scale = ctx.weights(i)
        S_prior = ctx.prior(i).Sigma[block]
        S_own = ctx.own(i).Sigma[block]
        S_others = theta.sigma2 * scale * ctx.Rt_matrix[block]
        try:
            inner = np.eye(missing.size) + S_others @ (np.linalg.inv(S_own) - np.linalg.inv(S_prior))
            A = np.linalg.inv(inner)
        except np.linalg.LinAlgError:
            values[i] = float("inf")
            continue
        total = 0.0
        for pos, k in enumerate(others):
            overlap = np.flatnonzero(~ctx.mask[k][missing])
            if overlap.size:
                total += abs(d[pos]) * spectral_norm(A[:, overlap])
        values[i] = total
    return values
