"""
First-stage modeling: average profile in t, run means in x, forward basis
selection, starting correlation rates, initial imputation of the missing
grid values and the exponential decay transform.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from src.kriging.corr import CorrParams, Design
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, FitOptions, KrigingModel, fit_grid
from src.utils.errors import FunkrigError

logger = logging.getLogger(__name__)

MIN_RELATIVE_GAIN = 0.01
DECAY_SCAN_POINTS = 64
DECAY_XATOL = 1e-9
DECAY_TIE_RTOL = 1e-12


def average_profile(dataset: FunctionalDataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Average of run-centered responses at each union-grid point.

    Returns:
        (union grid, average centered response, number of runs observed per point)
    """
    grid = dataset.union_grid
    sums = np.zeros(grid.size)
    counts = np.zeros(grid.size, dtype=int)
    for i, run in enumerate(dataset.runs):
        if not run.size:
            continue
        idx = dataset.positions(i, grid)
        sums[idx] += run.y - run.y.mean()
        counts[idx] += 1
    return grid, sums / counts, counts


def mean_profile(dataset: FunctionalDataset) -> Tuple[np.ndarray, np.ndarray]:
    """Raw mean response at each union-grid point over the runs observing it."""
    grid = dataset.union_grid
    sums = np.zeros(grid.size)
    counts = np.zeros(grid.size, dtype=int)
    for i, run in enumerate(dataset.runs):
        idx = dataset.positions(i, grid)
        sums[idx] += run.y
        counts[idx] += 1
    return grid, sums / counts


# ----------------------------------------------------------------------
# Forward selection
# ----------------------------------------------------------------------

def _forward_select(candidates: Sequence, fit_with) -> Tuple[List, KrigingModel, float]:
    """
    Greedy forward selection on leave-one-out RMSE.

    A term is accepted only when it lowers the criterion by at least 1%
    (and by more than round-off).
    """
    selected: List = []
    model = fit_with(selected)
    best = model.loo_rmse()
    remaining = list(candidates)
    while remaining:
        trials = []
        for term in remaining:
            try:
                trial = fit_with(selected + [term])
            except FunkrigError as exc:
                logger.debug(f"Candidate {term} rejected: {exc}")
                continue
            trials.append((trial.loo_rmse(), term, trial))
        if not trials:
            break
        score, term, trial = min(trials, key=lambda item: item[0])
        scale = max(1.0, float(np.max(np.abs(model.Y))))
        if not score < best - max(MIN_RELATIVE_GAIN * best, 1e-10 * scale):
            break
        logger.debug(f"Selected term {term}: LOO RMSE {best:.6g} -> {score:.6g}")
        selected.append(term)
        remaining.remove(term)
        model, best = trial, score
    return selected, model, best


@dataclass(frozen=True)
class MarginalTModel:
    """One-dimensional kriging model of the average profile."""
    terms: Tuple[int, ...]
    model: KrigingModel
    loo_rmse: float

    @property
    def mu_t0(self) -> float:
        return float(self.model.mu[0])

    @property
    def u_t(self) -> np.ndarray:
        return self.model.mu[1:]

    @property
    def beta0(self) -> float:
        return self.model.params.beta

    def predict(self, t: np.ndarray) -> np.ndarray:
        return self.model.predict_profile(np.zeros(0), t)


@dataclass(frozen=True)
class MarginalXModel:
    """Kriging model of the run means over the design."""
    terms: Tuple[Tuple[int, int], ...]
    model: KrigingModel
    loo_rmse: float

    @property
    def mu_x0(self) -> float:
        return float(self.model.mu[0])

    @property
    def nu_x(self) -> np.ndarray:
        return self.model.mu[1:]

    @property
    def alpha0(self) -> np.ndarray:
        return self.model.params.alphas

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict_profiles(X, np.zeros(1))[:, 0]


def fit_marginal_t(e_bar: np.ndarray, grid: np.ndarray, candidates: Sequence[int] = (1, 2),
                   d: int = 1, nugget: float = 1e-8, beta0: float = 1.0,
                   opts: Optional[FitOptions] = None) -> MarginalTModel:
    """Kriging model of the average profile with forward-selected t powers."""
    grid = np.asarray(grid, dtype=float)
    e_bar = np.asarray(e_bar, dtype=float)
    design = Design.empty(1)
    init = CorrParams(alphas=np.zeros(0), beta=beta0, d=d, nugget=nugget)
    base = BasisSpec.for_grid(grid)

    def fit_with(terms):
        return fit_grid(design, grid, e_bar.reshape(1, -1), base.with_terms(t_terms=terms), init, opts)

    terms, model, score = _forward_select(candidates, fit_with)
    logger.info(f"✅ Marginal t-model: terms={terms}, beta0={model.params.beta:.4g}, LOO RMSE={score:.4g}")
    return MarginalTModel(terms=tuple(terms), model=model, loo_rmse=score)


def fit_marginal_x(y_bar: np.ndarray, design: Design, candidates: Optional[Sequence[Tuple[int, int]]] = None,
                   d: int = 1, nugget: float = 1e-8, alpha0: float = 1.0,
                   opts: Optional[FitOptions] = None) -> MarginalXModel:
    """
    Kriging model of the run means with forward-selected x monomials.

    Candidates default to the linear term of every continuous variable.
    """
    if candidates is None:
        candidates = [(k, 1) for k, spec in enumerate(design.variables) if not spec.is_categorical]
    y_bar = np.asarray(y_bar, dtype=float)
    grid = np.zeros(1)
    init = CorrParams(alphas=np.full(design.p, alpha0), beta=1.0, d=d, nugget=nugget)
    base = BasisSpec()

    def fit_with(terms):
        return fit_grid(design, grid, y_bar.reshape(-1, 1), base.with_terms(x_terms=terms), init, opts)

    terms, model, score = _forward_select(candidates, fit_with)
    logger.info(f"✅ Marginal x-model: terms={terms}, alpha0={np.round(model.params.alphas, 4).tolist()}, "
                f"LOO RMSE={score:.4g}")
    return MarginalXModel(terms=tuple(terms), model=model, loo_rmse=score)


def init_missing(dataset: FunctionalDataset, mt: MarginalTModel, mx: MarginalXModel,
                 grid: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """
    Starting values for every run's unobserved grid points.

    Each value is the sum of the two marginal kriging predictions at the run's
    setting and the missing abscissa.

    Returns:
        One array per run, ordered along the grid (empty for complete runs)
    """
    grid = dataset.union_grid if grid is None else np.asarray(grid, dtype=float)
    mask = dataset.observed_mask(grid)
    x_part = mx.predict(dataset.design.rows)
    t_part = mt.predict(grid)
    return [t_part[~mask[i]] + x_part[i] for i in range(dataset.n)]


# ----------------------------------------------------------------------
# Decay transform
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DecayTransform:
    """
    Mean curve exp(-lam t)(p0 + p1 t + p2 t^2); data are rescaled by exp(lam t).
    """
    lam: float = 0.0
    poly: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"decay rate must be nonnegative, got {self.lam}")

    @property
    def is_identity(self) -> bool:
        return self.lam == 0.0

    def forward(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * np.exp(self.lam * np.asarray(t, dtype=float))

    def inverse(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * np.exp(-self.lam * np.asarray(t, dtype=float))

    def curve(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.exp(-self.lam * t) * np.polyval(self.poly[::-1], t)


def _decay_sse(lam: float, t: np.ndarray, s: np.ndarray) -> Tuple[float, np.ndarray]:
    decay = np.exp(-lam * t)
    A = np.stack([decay, decay * t, decay * t ** 2], axis=1)
    coef, *_ = np.linalg.lstsq(A, s, rcond=None)
    resid = s - A @ coef
    return float(resid @ resid), coef


def fit_decay_transform(profile: np.ndarray, grid: np.ndarray) -> DecayTransform:
    """
    Least-squares fit of exp(-lam t)(p0 + p1 t + p2 t^2) to a mean profile.

    The polynomial is profiled out by OLS; lam is scanned on [0, 1/h] (h the
    mean spacing) and refined with a bounded Brent search. lam = 0 wins ties.
    """
    t = np.asarray(grid, dtype=float)
    s = np.asarray(profile, dtype=float)
    if t.size < 4:
        logger.warning(f"⚠️ Decay transform needs at least 4 grid points, got {t.size}; using identity")
        return DecayTransform()

    lam_max = 1.0 / float(np.mean(np.diff(t)))
    scan = np.linspace(0.0, lam_max, DECAY_SCAN_POINTS)
    sse = np.array([_decay_sse(lam, t, s)[0] for lam in scan])
    k = int(np.argmin(sse))
    lo, hi = scan[max(k - 1, 0)], scan[min(k + 1, scan.size - 1)]
    result = optimize.minimize_scalar(lambda lam: _decay_sse(lam, t, s)[0], bounds=(lo, hi),
                                      method="bounded", options={"xatol": DECAY_XATOL})
    lam = float(result.x)
    sse_best, coef = _decay_sse(lam, t, s)
    sse_zero, coef_zero = _decay_sse(0.0, t, s)
    if sse_zero <= sse_best + DECAY_TIE_RTOL * float(s @ s):
        lam, coef = 0.0, coef_zero
    logger.info(f"✅ Decay transform: lambda={lam:.6g}, poly={np.round(coef, 6).tolist()}")
    return DecayTransform(lam=lam, poly=tuple(float(c) for c in coef))


def apply_transform(dataset: FunctionalDataset, transform: DecayTransform, direction: int = 1
                    ) -> FunctionalDataset:
    """Multiply every response by exp(direction * lam * t)."""
    if direction not in (1, -1):
        raise ValueError(f"direction must be +1 or -1, got {direction}")
    step = transform.forward if direction == 1 else transform.inverse
    return dataset.with_responses([step(run.t, run.y) for run in dataset.runs])
