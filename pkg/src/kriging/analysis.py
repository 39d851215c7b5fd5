"""
Post-fit analytics: min-max optimization of the predicted profile, main-effect
curves and mean squared cross-validation error with two leave-one-out
procedures (EM-completed and common-grid-only).
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from config.settings import settings
from src.kriging.corr import CorrParams, Design
from src.kriging.dataset import FunctionalDataset
from src.kriging.em_complete import EMResult, EMState, ce_sweep
from src.kriging.kron_kriging import BasisSpec, KrigingModel, build_model
from src.kriging.stage1 import DecayTransform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerMax:
    """Worst case of the predicted profile at one setting."""
    t: float
    value: float
    setting: np.ndarray


@dataclass
class OptimResult:
    x_star: np.ndarray
    worst_t: float
    worst_value: float
    trace: List[float] = field(default_factory=list)
    exhausted: bool = False
    worst_setting: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        return {
            "x_star": self.x_star.tolist(),
            "worst_t": self.worst_t,
            "worst_value": self.worst_value,
            "worst_setting": None if self.worst_setting is None else self.worst_setting.tolist(),
            "trace": list(self.trace),
            "exhausted": self.exhausted,
        }


@dataclass
class EffectCurve:
    variable: int
    levels: np.ndarray
    t: np.ndarray
    effect: np.ndarray
    overall: np.ndarray


@dataclass
class MinimaxOptions:
    restarts: int = 20
    max_evals: int = 2000
    seed: Optional[int] = None
    refine: int = 1
    max_vars: Tuple[int, ...] = ()
    transform: Optional[DecayTransform] = None


def refine_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    """Insert factor - 1 evenly spaced points inside every grid interval."""
    grid = np.asarray(grid, dtype=float)
    if factor <= 1 or grid.size < 2:
        return grid
    pieces = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(grid[:-1], grid[1:])]
    return np.concatenate(pieces + [grid[-1:]])


def _expand_levels(model: KrigingModel, X: np.ndarray, max_vars: Sequence[int]) -> np.ndarray:
    """Every combination of the max-over variables' levels applied to each setting of X."""
    if not max_vars:
        return X
    level_sets = [model.design.variables[k].level_values() for k in max_vars]
    combos = np.array(list(itertools.product(*level_sets)))
    out = np.repeat(X, combos.shape[0], axis=0)
    out[:, list(max_vars)] = np.tile(combos, (X.shape[0], 1))
    return out


def max_over_t(model: KrigingModel, x: np.ndarray, t_grid: Optional[np.ndarray] = None,
               max_vars: Sequence[int] = (), transform: Optional[DecayTransform] = None) -> InnerMax:
    """
    Exhaustive maximum of the prediction over t_grid and the levels of max_vars.

    With a decay transform the maximum is taken on the original response scale.
    Ties go to the lowest level combination, then the lowest t index.
    """
    t_grid = model.grid if t_grid is None else np.asarray(t_grid, dtype=float)
    if t_grid.size == 0:
        raise ValueError("t_grid must be nonempty")
    X = _expand_levels(model, np.asarray(x, dtype=float).reshape(1, -1), max_vars)
    P = model.predict_profiles(X, t_grid)
    if transform is not None:
        P = transform.inverse(t_grid, P)
    flat = int(np.argmax(P))
    row, col = divmod(flat, t_grid.size)
    return InnerMax(t=float(t_grid[col]), value=float(P[row, col]), setting=X[row])


def _free_variables(design: Design, max_vars: Sequence[int]) -> Tuple[List[int], List[int]]:
    continuous, categorical = [], []
    for k, spec in enumerate(design.variables):
        if k in max_vars:
            continue
        (categorical if spec.is_categorical else continuous).append(k)
    return continuous, categorical


def _sobol(dim: int, count: int, seed: int) -> np.ndarray:
    if count <= 0 or dim == 0:
        return np.zeros((0, dim))
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    return sampler.random_base2(int(np.ceil(np.log2(count))))[:count]


def minimax_optimize(model: KrigingModel, bounds: Optional[Sequence[Tuple[float, float]]] = None,
                     opts: Optional[MinimaxOptions] = None) -> OptimResult:
    """
    Minimize over x the maximum over t (and max_vars levels) of the prediction.

    Categorical variables outside max_vars are enumerated; for each combination
    Nelder-Mead runs from every matching design row and from scrambled Sobol
    starts inside the continuous bounds.
    """
    opts = opts or MinimaxOptions()
    seed = settings.default_seed if opts.seed is None else opts.seed
    design = model.design
    max_vars = tuple(opts.max_vars)
    t_grid = refine_grid(model.grid, opts.refine)
    continuous, categorical = _free_variables(design, max_vars)
    if bounds is None:
        bounds = [(design.variables[k].lo, design.variables[k].hi) for k in continuous]
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    if lo.size != len(continuous):
        raise ValueError(f"{lo.size} bounds for {len(continuous)} continuous variables")

    base = design.rows[0].copy()
    for k in max_vars:
        base[k] = 1.0
    combos = list(itertools.product(*[design.variables[k].level_values() for k in categorical])) or [()]
    unit_starts = _sobol(len(continuous), opts.restarts, seed)

    best: Optional[Tuple[float, np.ndarray]] = None
    trace: List[float] = []
    exhausted = False
    logger.info(f"🚀 Minimax search: {len(combos)} categorical combination(s), {len(continuous)} continuous "
                f"variable(s), {t_grid.size} t points")
    for combo in combos:
        template = base.copy()
        template[categorical] = combo

        def setting(u: np.ndarray) -> np.ndarray:
            x = template.copy()
            x[continuous] = np.clip(u, lo, hi)
            return x

        def objective(u: np.ndarray) -> float:
            return max_over_t(model, setting(u), t_grid, max_vars, opts.transform).value

        if not continuous:
            value = objective(np.zeros(0))
            trace.append(value)
            if best is None or value < best[0]:
                best = (value, setting(np.zeros(0)))
            continue

        matching = np.all(design.rows[:, categorical] == np.asarray(combo), axis=1) if categorical \
            else np.ones(design.n, dtype=bool)
        starts = [row[continuous] for row in design.rows[matching]]
        starts += [lo + u * (hi - lo) for u in unit_starts]
        for start in starts:
            result = optimize.minimize(objective, np.clip(start, lo, hi), method="Nelder-Mead",
                                       options={"maxfev": opts.max_evals, "xatol": 1e-8, "fatol": 1e-10})
            exhausted = exhausted or result.nfev >= opts.max_evals
            value = float(result.fun)
            trace.append(value)
            if best is None or value < best[0]:
                best = (value, setting(result.x))

    x_star = best[1]
    worst = max_over_t(model, x_star, t_grid, max_vars, opts.transform)
    logger.info(f"✅ Minimax optimum {worst.value:.6g} at t={worst.t:.6g}")
    if exhausted:
        logger.warning("⚠️ At least one Nelder-Mead start hit max_evals")
    return OptimResult(x_star=x_star, worst_t=worst.t, worst_value=worst.value, trace=trace,
                       exhausted=exhausted, worst_setting=worst.setting)


def main_effects(model: KrigingModel, variable: int, levels: Optional[np.ndarray] = None,
                 mc_nodes: int = 256, seed: Optional[int] = None) -> EffectCurve:
    """
    Average prediction over the other variables with `variable` clamped at each level.

    The other variables are integrated with a scrambled Sobol sequence over the
    design space; the same nodes are used for every level.
    """
    design = model.design
    spec = design.variables[variable]
    if levels is None:
        levels = spec.level_values() if spec.is_categorical else np.linspace(spec.lo, spec.hi, 11)
    levels = np.asarray(levels, dtype=float)
    seed = settings.default_seed if seed is None else seed

    units = _sobol(design.p, mc_nodes, seed)
    nodes = np.empty_like(units)
    for k, other in enumerate(design.variables):
        if other.is_categorical:
            nodes[:, k] = np.minimum(np.floor(units[:, k] * other.levels), other.levels - 1) + 1
        else:
            nodes[:, k] = other.lo + units[:, k] * (other.hi - other.lo)

    predictions = np.empty((levels.size, mc_nodes, model.m))
    for j, level in enumerate(levels):
        X = nodes.copy()
        X[:, variable] = level
        predictions[j] = model.predict_profiles(X, model.grid)
    return EffectCurve(variable=variable, levels=levels, t=model.grid.copy(),
                       effect=predictions.mean(axis=1), overall=predictions.mean(axis=(0, 1)))


# ----------------------------------------------------------------------
# Cross validation
# ----------------------------------------------------------------------

LooProcedure = Callable[[FunctionalDataset, int, np.ndarray, np.ndarray], np.ndarray]


def mscv(dataset: FunctionalDataset, procedure: LooProcedure, probes: Sequence[int]) -> float:
    """
    Mean over probe runs of the squared leave-one-out error averaged over each run's points.

    procedure(train, left_out, x, t) predicts the left-out run at its abscissae
    from the training dataset.
    """
    errors = loo_errors(dataset, procedure, probes)
    return float(np.mean(errors)) if errors else 0.0


def loo_errors(dataset: FunctionalDataset, procedure: LooProcedure, probes: Sequence[int]) -> List[float]:
    errors = []
    for i in probes:
        if not 0 <= i < dataset.n:
            raise ValueError(f"probe run {i + 1} not in dataset")
        run = dataset.runs[i]
        prediction = procedure(dataset.without(i), i, dataset.design.rows[i], run.t)
        errors.append(float(np.mean((np.asarray(prediction) - run.y) ** 2)))
        logger.debug(f"LOO run {i + 1}: mean squared error {errors[-1]:.6g}")
    return errors


class EMCompletedProcedure:
    """
    Predict a left-out run from the EM-completed training runs at fixed theta.

    The training rows of the full completion seed q conditional-expectation
    sweeps on the training data alone; mu and sigma2 are then re-estimated with
    the correlation parameters held.
    """

    def __init__(self, result: EMResult, basis: BasisSpec, q: int = 10):
        self.result = result
        self.basis = basis
        self.q = q

    def model_for(self, train: FunctionalDataset, left_out: int) -> KrigingModel:
        grid = self.result.model.grid
        keep = [k for k in range(self.result.completed.shape[0]) if k != left_out]
        state = EMState.initialize(train, self.basis, self.result.theta, grid=grid)
        start = self.result.completed[keep]
        state.c[~state.mask] = start[~state.mask]
        if state.has_missing:
            for _ in range(self.q):
                ce_sweep(state)
        return build_model(train.design, grid, state.c, self.basis, self.result.theta.params)

    def __call__(self, train: FunctionalDataset, left_out: int, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.model_for(train, left_out).predict_profile(x, t)


class CommonGridProcedure:
    """Predict a left-out run from the training runs truncated to their common grid."""

    def __init__(self, params: CorrParams, basis: BasisSpec):
        self.params = params
        self.basis = basis

    def model_for(self, train: FunctionalDataset, left_out: int) -> KrigingModel:
        common = train.truncate_to_common()
        return build_model(common.design, common.union_grid, common.matrix(), self.basis, self.params)

    def __call__(self, train: FunctionalDataset, left_out: int, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.model_for(train, left_out).predict_profile(x, t)
