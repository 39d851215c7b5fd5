"""
Pipeline service: ties data files, the two-stage fit, EM completion and the
post-fit analyses together for the command-line surface.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.project import ProjectConfig
from config.settings import settings
from src.kriging.analysis import (
    CommonGridProcedure,
    EffectCurve,
    EMCompletedProcedure,
    MinimaxOptions,
    OptimResult,
    main_effects,
    minimax_optimize,
    mscv,
)
from src.kriging.corr import CorrParams
from src.kriging.dataset import FunctionalDataset
from src.kriging.em_complete import EMDiagnostics, EMMode, EMOptions, EMResult, Theta, run_em
from src.kriging.kron_kriging import BasisSpec, FitOptions, build_model, fit_regular, profile_fit
from src.kriging.oracle import dense_neg_loglik
from src.kriging.stage1 import (
    DecayTransform,
    MarginalTModel,
    MarginalXModel,
    apply_transform,
    average_profile,
    fit_decay_transform,
    fit_marginal_t,
    fit_marginal_x,
    init_missing,
    mean_profile,
)
from src.kriging.synthetic import GeneratedData, TruthSpec, generate, latin_hypercube, sample_profiles
from src.utils import io
from src.utils.errors import ConfigError, DataError, NumericalBreakdown

BENCHMARK_AGREEMENT = 1e-6
DEFAULT_PROBES = 6


@dataclass
class FitOutcome:
    """Everything a fit produces: the saved bundle plus the objects validation reuses."""
    bundle: io.ModelBundle
    result: EMResult
    basis: BasisSpec
    working: FunctionalDataset
    marginal_t: MarginalTModel
    marginal_x: MarginalXModel


@dataclass
class ValidationOutcome:
    probes: List[int]
    rows: List[Dict[str, Any]]
    mscv_em: float
    mscv_common: Optional[float] = None

    def summary(self) -> str:
        lines = [
            "leave-one-out validation",
            f"probe runs: {', '.join(str(i + 1) for i in self.probes)}",
            f"MSCV (EM-completed): {self.mscv_em:.6g}",
        ]
        if self.mscv_common is None:
            lines.append("MSCV (common grid only): n/a (runs share no abscissae)")
        else:
            lines.append(f"MSCV (common grid only): {self.mscv_common:.6g}")
        return "\n".join(lines) + "\n"


class PipelineService:
    """Runs the analysis described by one ProjectConfig."""

    def __init__(self, config: ProjectConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    @property
    def seed(self) -> int:
        return settings.default_seed if self.config.seed is None else self.config.seed

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    def fit_options(self, n_restarts: Optional[int] = None) -> FitOptions:
        cfg = self.config
        return FitOptions(
            n_restarts=cfg.fit_restarts if n_restarts is None else n_restarts,
            seed=self.seed,
            max_evals=cfg.fit_max_evals,
            kappa=cfg.kappa,
        )

    # ------------------------------------------------------------------
    # Data
    # ------------------------------------------------------------------

    def load_dataset(self) -> FunctionalDataset:
        cfg = self.config
        if not cfg.design_path or not cfg.profile_path:
            raise ConfigError("design_path and profile_path are required", field="design_path")
        design = io.read_design_csv(cfg.design_path, cfg.variable_specs())
        dataset = io.read_profiles_csv(cfg.profile_path, design)
        self.logger.info(f"✅ Loaded {dataset.n} runs, {dataset.total_points} points, "
                         f"{'regular' if dataset.is_regular else 'irregular'} grid")
        return dataset

    # ------------------------------------------------------------------
    # Fit
    # ------------------------------------------------------------------

    def fit(self, dataset: FunctionalDataset) -> FitOutcome:
        """Transform, stage-one models, then a direct fit (regular) or EM completion."""
        cfg = self.config
        transform = DecayTransform()
        if cfg.transform:
            grid, profile = mean_profile(dataset)
            transform = fit_decay_transform(profile, grid)
        working = dataset if transform.is_identity else apply_transform(dataset, transform)

        fit_opts = self.fit_options()
        grid, e_bar, _ = average_profile(working)
        marginal_t = fit_marginal_t(e_bar, grid, cfg.t_candidates, cfg.d, cfg.nugget, opts=fit_opts)
        marginal_x = fit_marginal_x(working.run_means(), working.design, cfg.x_terms(), cfg.d, cfg.nugget,
                                    opts=fit_opts)
        basis = BasisSpec.for_grid(grid, marginal_t.terms, marginal_x.terms)
        init = CorrParams(alphas=marginal_x.alpha0, beta=marginal_t.beta0, d=cfg.d, nugget=cfg.nugget)

        if working.is_regular:
            model = fit_regular(working, basis, init, fit_opts)
            diagnostics = EMDiagnostics(iterations=0, converged=True, param_deltas=[], sweep_deltas=[],
                                        prop2=np.zeros(working.n), mode=EMMode(cfg.em_mode), q=cfg.em_q)
            result = EMResult(model=model, completed=model.Y, theta=Theta.from_model(model),
                              diagnostics=diagnostics, mask=np.ones(model.Y.shape, dtype=bool))
            em_report = None
        else:
            z0 = init_missing(working, marginal_t, marginal_x)
            mask = working.observed_mask(grid)
            start = working.matrix(grid)
            for i, z in enumerate(z0):
                start[i, ~mask[i]] = z
            theta0 = Theta.from_model(build_model(working.design, grid, start, basis, init))
            em_opts = EMOptions(
                q=cfg.em_q,
                delta=cfg.em_delta,
                max_iter=cfg.em_max_iter,
                mode=EMMode(cfg.em_mode),
                seed=self.seed if cfg.em_seed is None else cfg.em_seed,
                strict=cfg.em_strict,
                fit=self.fit_options(n_restarts=0),
            )
            result = run_em(working, basis, theta0, z0, em_opts)
            em_report = result.diagnostics.to_dict()

        names = list(working.design.names)
        stage1 = {
            "t terms": basis.labels(names)[1:1 + len(marginal_t.terms)] or "none",
            "x terms": basis.labels(names)[1 + len(marginal_t.terms):] or "none",
            "beta0": round(marginal_t.beta0, 6),
            "alpha0": np.round(marginal_x.alpha0, 6).tolist(),
            "t-model LOO RMSE": round(marginal_t.loo_rmse, 6),
            "x-model LOO RMSE": round(marginal_x.loo_rmse, 6),
        }
        bundle = io.ModelBundle(model=result.model, transform=transform,
                                mask=None if working.is_regular else result.mask, em=em_report, stage1=stage1)
        return FitOutcome(bundle=bundle, result=result, basis=basis, working=working,
                          marginal_t=marginal_t, marginal_x=marginal_x)

    def save_fit(self, outcome: FitOutcome, dataset: FunctionalDataset) -> Tuple[Path, Path]:
        model_path = self.out_dir / "model.json"
        report_path = self.out_dir / "report.txt"
        io.save_model(outcome.bundle, str(model_path))
        io.write_report(str(report_path), io.format_report(outcome.bundle, dataset))
        return model_path, report_path

    # ------------------------------------------------------------------
    # Predict
    # ------------------------------------------------------------------

    def predict(self, bundle: io.ModelBundle, X: np.ndarray, t: np.ndarray, kappa: Optional[float] = None
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        kappa = self.config.kappa if kappa is None else kappa
        if t.size == 0:
            empty = np.zeros(0)
            return empty, empty, empty, np.zeros(0, dtype=bool)
        y_hat, lo, hi = bundle.predict_ci_points(X, t, kappa)
        extrapolated = np.array([bundle.model.is_extrapolation(x, s) for x, s in zip(X, t)], dtype=bool)
        if extrapolated.any():
            self.logger.warning(f"⚠️ {int(extrapolated.sum())} query point(s) lie outside the design space or grid")
        return y_hat, lo, hi, extrapolated

    # ------------------------------------------------------------------
    # Validate
    # ------------------------------------------------------------------

    def default_probes(self, n: int) -> List[int]:
        if self.config.probes:
            probes = [p - 1 for p in self.config.probes]
            for p in probes:
                if not 0 <= p < n:
                    raise ConfigError(f"probe run {p + 1} outside 1..{n}", field="probes")
            return probes
        count = min(DEFAULT_PROBES, n)
        return sorted(set(np.linspace(0, n - 1, count).round().astype(int).tolist()))

    def validate(self, outcome: FitOutcome, probes: Optional[Sequence[int]] = None) -> ValidationOutcome:
        """
        Leave-one-out profiles with intervals for the EM-completed model, and
        MSCV of the EM-completed and common-grid-only procedures.

        Errors are measured on the working (transformed) scale; the profile rows
        are reported on the original scale.
        """
        working = outcome.working
        if working.n < 3:
            raise DataError(f"leave-one-out needs at least 3 runs, got {working.n}")
        probes = list(probes) if probes is not None else self.default_probes(working.n)
        transform = outcome.bundle.transform
        em_procedure = EMCompletedProcedure(outcome.result, outcome.basis, q=self.config.em_q)
        common_procedure = CommonGridProcedure(outcome.result.theta.params, outcome.basis)

        self.logger.info(f"🚀 Leave-one-out over {len(probes)} probe run(s)")
        rows: List[Dict[str, Any]] = []
        for i in probes:
            run = working.runs[i]
            model = em_procedure.model_for(working.without(i), i)
            y_hat, lo, hi = model.predict_profile_ci(working.design.rows[i], run.t, self.config.kappa)
            original = transform.inverse(run.t, run.y)
            for k, t in enumerate(run.t):
                rows.append({
                    "run_id": i + 1,
                    "t": t,
                    "y": original[k],
                    "y_hat": float(transform.inverse(t, y_hat[k])),
                    "lo": float(transform.inverse(t, lo[k])),
                    "hi": float(transform.inverse(t, hi[k])),
                })

        score_em = mscv(working, em_procedure, probes)
        try:
            score_common: Optional[float] = mscv(working, common_procedure, probes)
        except DataError as exc:
            self.logger.warning(f"⚠️ Common-grid comparison skipped: {exc}")
            score_common = None
        self.logger.info(f"✅ MSCV: EM-completed {score_em:.6g}, common grid "
                         f"{'n/a' if score_common is None else f'{score_common:.6g}'}")
        return ValidationOutcome(probes=probes, rows=rows, mscv_em=score_em, mscv_common=score_common)

    # ------------------------------------------------------------------
    # Analyses on a saved model
    # ------------------------------------------------------------------

    def _variable_indices(self, bundle: io.ModelBundle, names: Sequence[str]) -> List[int]:
        known = list(bundle.names)
        missing = [name for name in names if name not in known]
        if missing:
            raise ConfigError(f"unknown variable(s) {missing}; the model has {known}", field="max_vars")
        return [known.index(name) for name in names]

    def optimize(self, bundle: io.ModelBundle, bounds: Optional[Sequence[Tuple[float, float]]] = None
                 ) -> OptimResult:
        cfg = self.config
        max_vars = tuple(self._variable_indices(bundle, cfg.max_vars))
        for k in max_vars:
            if not bundle.model.design.variables[k].is_categorical:
                raise ConfigError(f"max_vars entry '{bundle.names[k]}' is not categorical", field="max_vars")
        opts = MinimaxOptions(restarts=cfg.opt_restarts, max_evals=cfg.opt_max_evals, seed=self.seed,
                              refine=cfg.opt_refine, max_vars=max_vars, transform=bundle.transform)
        return minimax_optimize(bundle.model, bounds, opts)

    def sensitivity(self, bundle: io.ModelBundle, names: Sequence[str] = ()) -> List[Tuple[str, EffectCurve]]:
        names = list(names) or list(self.config.sensitivity_vars) or list(bundle.names)
        curves = []
        for k, name in zip(self._variable_indices(bundle, names), names):
            curve = main_effects(bundle.model, k, mc_nodes=self.config.mc_nodes, seed=self.seed)
            scale = np.exp(-bundle.transform.lam * curve.t)
            curve.effect = curve.effect * scale
            curve.overall = curve.overall * scale
            curves.append((name, curve))
            self.logger.info(f"✅ Main effect of {name}: {curve.levels.size} levels")
        return curves

    # ------------------------------------------------------------------
    # Synthetic data
    # ------------------------------------------------------------------

    def truth_spec(self) -> TruthSpec:
        cfg = self.config
        return TruthSpec(
            n=cfg.gen_n,
            m=cfg.gen_m,
            p=cfg.gen_p,
            t_range=(cfg.gen_t_min, cfg.gen_t_max),
            alphas=tuple(cfg.gen_alphas),
            beta=cfg.gen_beta,
            d=cfg.d,
            sigma2=cfg.gen_sigma2,
            mu=tuple(cfg.gen_mu),
            t_terms=tuple(cfg.gen_t_terms),
            x_terms=cfg.generator_x_terms(),
            keep_range=(cfg.gen_keep_lo, cfg.gen_keep_hi),
            design=cfg.gen_design,
        )

    def generate(self) -> Tuple[GeneratedData, Dict[str, Path]]:
        spec = self.truth_spec()
        size = 1 + len(spec.t_terms) + len(spec.x_terms)
        if len(spec.mu) != size:
            raise ConfigError(f"gen_mu has {len(spec.mu)} entries for {size} basis terms", field="gen_mu")
        if not spec.t_range[1] > spec.t_range[0]:
            raise ConfigError("gen_t_max must exceed gen_t_min", field="gen_t_max")
        data = generate(spec, self.seed)
        paths = {
            "design": self.out_dir / "design.csv",
            "profiles": self.out_dir / "profiles.csv",
            "truth": self.out_dir / "truth.csv",
            "config": self.out_dir / "project.cfg",
        }
        io.write_design_csv(data.dataset.design, str(paths["design"]))
        io.write_profiles_csv(data.dataset, str(paths["profiles"]))
        io.write_truth_csv(data.grid, data.truth, str(paths["truth"]))
        variables = []
        for spec_k in data.dataset.design.variables:
            if spec_k.is_categorical:
                variables.append(f"{spec_k.name}:categorical:{spec_k.levels}")
            else:
                variables.append(f"{spec_k.name}:continuous:{spec_k.lo!r}:{spec_k.hi!r}")
        project = self.config.with_overrides(design_path=str(paths["design"]), profile_path=str(paths["profiles"]),
                                             variables=variables)
        project.save(str(paths["config"]))
        self.logger.info(f"✅ Synthetic data written to {self.out_dir}")
        return data, paths

    # ------------------------------------------------------------------
    # Benchmark
    # ------------------------------------------------------------------

    def benchmark(self, sizes: Sequence[Tuple[int, int]], repetitions: int) -> List[Dict[str, Any]]:
        """
        One likelihood evaluation on the dense system, the Kronecker form with a
        Cholesky-factored R_t, and the Kronecker form with the closed-form R_t.

        repetitions = 0 checks agreement only and returns no timing rows.

        Raises:
            NumericalBreakdown: the three values disagree beyond 1e-6
        """
        rows: List[Dict[str, Any]] = []
        params = CorrParams(alphas=np.full(2, 5.0), beta=3.0, d=1, nugget=0.0)
        for n, m in sizes:
            design = latin_hypercube(n, 2, self.seed)
            grid = np.linspace(0.0, 1.0, m)
            basis = BasisSpec.for_grid(grid)
            Y = sample_profiles(design, grid, basis, np.zeros(1), 1.0, params, np.random.default_rng(self.seed))
            dataset = FunctionalDataset.from_matrix(design, grid, Y)
            paths: Dict[str, Callable[[], float]] = {
                "dense": lambda: dense_neg_loglik(dataset, basis, params),
                "kronecker": lambda: profile_fit(design, grid, Y, basis, params, force_dense=True).value,
                "closed_form": lambda: profile_fit(design, grid, Y, basis, params).value,
            }
            values = {name: evaluate() for name, evaluate in paths.items()}
            reference = values["dense"]
            for name, value in values.items():
                if abs(value - reference) > BENCHMARK_AGREEMENT * max(1.0, abs(reference)):
                    raise NumericalBreakdown(f"n={n}, m={m}: {name} likelihood {value!r} disagrees with dense "
                                             f"{reference!r}")
            self.logger.info(f"✅ n={n}, m={m}: likelihood paths agree ({reference:.6f})")
            if repetitions <= 0:
                continue
            for name, evaluate in paths.items():
                times = []
                for _ in range(repetitions):
                    start = time.perf_counter()
                    evaluate()
                    times.append(time.perf_counter() - start)
                rows.append({"n": n, "m": m, "path": name, "median_seconds": float(np.median(times)),
                             "value": values[name]})
                self.logger.debug(f"n={n}, m={m}, {name}: median {rows[-1]['median_seconds']:.4g}s")
        return rows

