"""
Command-line surface: generate | fit | predict | validate | optimize |
sensitivity | benchmark.

Exit codes: 0 ok, 2 input error, 3 numeric failure.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.project import ProjectConfig
from config.settings import settings
from src import __version__
from src.services.pipeline_service import PipelineService
from src.utils import io
from src.utils.errors import ConfigError, FunkrigError
from src.utils.logging_setup import setup_logging

logger = logging.getLogger(__name__)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project config file (key=value)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out-dir", dest="out_dir", help="output directory (overrides the config)")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="funkrig", description="Kriging for functional responses")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="synthetic design, profiles and truth")
    generate.add_argument("--n", dest="gen_n", type=int)
    generate.add_argument("--m", dest="gen_m", type=int)
    generate.add_argument("--p", dest="gen_p", type=int)
    generate.add_argument("--design", dest="gen_design", choices=["lhs", "blhd"])
    generate.add_argument("--alphas", dest="gen_alphas")
    generate.add_argument("--beta", dest="gen_beta", type=float)
    generate.add_argument("--sigma2", dest="gen_sigma2", type=float)
    generate.add_argument("--keep-lo", dest="gen_keep_lo", type=float)
    generate.add_argument("--keep-hi", dest="gen_keep_hi", type=float)
    generate.set_defaults(handler=cmd_generate)

    fit = commands.add_parser("fit", parents=[common], help="fit a model and write model.json + report.txt")
    _data_flags(fit)
    fit.set_defaults(handler=cmd_fit)

    predict = commands.add_parser("predict", parents=[common], help="predictions with confidence intervals")
    predict.add_argument("--model", required=True)
    predict.add_argument("--query", required=True)
    predict.add_argument("--kappa", type=float)
    predict.add_argument("--output")
    predict.set_defaults(handler=cmd_predict)

    validate = commands.add_parser("validate", parents=[common], help="leave-one-out profiles and MSCV")
    _data_flags(validate)
    validate.add_argument("--probes", help="comma-separated 1-based run ids")
    validate.set_defaults(handler=cmd_validate)

    optimize = commands.add_parser("optimize", parents=[common], help="min-max optimization of a saved model")
    optimize.add_argument("--model", required=True)
    optimize.add_argument("--bounds", help="lo:hi per continuous variable, comma separated")
    optimize.add_argument("--restarts", dest="opt_restarts", type=int)
    optimize.add_argument("--max-evals", dest="opt_max_evals", type=int)
    optimize.add_argument("--refine", dest="opt_refine", type=int)
    optimize.add_argument("--max-vars", dest="max_vars", help="categorical variables to maximize over")
    optimize.set_defaults(handler=cmd_optimize)

    sensitivity = commands.add_parser("sensitivity", parents=[common], help="main-effect curves")
    sensitivity.add_argument("--model", required=True)
    sensitivity.add_argument("--variables", dest="sensitivity_vars")
    sensitivity.add_argument("--mc-nodes", dest="mc_nodes", type=int)
    sensitivity.set_defaults(handler=cmd_sensitivity)

    benchmark = commands.add_parser("benchmark", parents=[common], help="time the likelihood paths")
    benchmark.add_argument("--sizes", dest="bench_sizes", help="NxM pairs, comma separated")
    benchmark.add_argument("--repetitions", dest="bench_repetitions", type=int)
    benchmark.set_defaults(handler=cmd_benchmark)
    return parser


def _data_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--design", dest="design_path")
    sub.add_argument("--profiles", dest="profile_path")
    sub.add_argument("--transform", dest="transform", action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--nugget", type=float)
    sub.add_argument("--d", type=int)
    sub.add_argument("--em-q", dest="em_q", type=int)
    sub.add_argument("--em-delta", dest="em_delta", type=float)
    sub.add_argument("--em-max-iter", dest="em_max_iter", type=int)
    sub.add_argument("--em-mode", dest="em_mode", choices=["expectation", "sampling"])


NON_CONFIG_ARGS = {"command", "handler", "config", "verbose", "model", "query", "output", "bounds"}


def load_config(args: argparse.Namespace) -> ProjectConfig:
    """Config file (if any) with every given CLI flag applied on top."""
    config = ProjectConfig.load(args.config) if args.config else ProjectConfig()
    overrides: Dict[str, Any] = {key: value for key, value in vars(args).items()
                                 if key not in NON_CONFIG_ARGS and value is not None}
    return config.with_overrides(**overrides)


def _parse_bounds(text: Optional[str]) -> Optional[List[Tuple[float, float]]]:
    if not text:
        return None
    bounds = []
    for part in text.split(","):
        try:
            lo, hi = (float(v) for v in part.split(":"))
        except ValueError:
            raise ConfigError(f"bounds entry '{part}' must be lo:hi", field="bounds")
        if not hi > lo:
            raise ConfigError(f"bounds entry '{part}' is empty", field="bounds")
        bounds.append((lo, hi))
    return bounds


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    data, paths = service.generate()
    logger.info(f"✅ Generated {data.dataset.n} runs: {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_fit(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    dataset = service.load_dataset()
    outcome = service.fit(dataset)
    model_path, report_path = service.save_fit(outcome, dataset)
    logger.info(f"✅ Model written to {model_path}, report to {report_path}")
    return 0


def cmd_predict(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    bundle = io.load_model(args.model)
    X, t = io.read_query_csv(args.query, bundle.names)
    y_hat, lo, hi, extrapolated = service.predict(bundle, X, t, config.kappa)
    output = args.output or str(Path(config.out_dir) / "predictions.csv")
    io.write_predictions_csv(output, bundle.names, X, t, y_hat, lo, hi, extrapolated)
    logger.info(f"✅ {t.size} prediction(s) written to {output}")
    return 0


def cmd_validate(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    dataset = service.load_dataset()
    outcome = service.fit(dataset)
    validation = service.validate(outcome)
    out = Path(config.out_dir)
    io.write_loo_csv(str(out / "loo_profiles.csv"), validation.rows)
    io.write_report(str(out / "mscv.txt"), validation.summary())
    logger.info(f"✅ Leave-one-out profiles and MSCV summary written to {out}")
    return 0


def cmd_optimize(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    bundle = io.load_model(args.model)
    result = service.optimize(bundle, _parse_bounds(args.bounds))
    payload = result.to_dict()
    payload["variables"] = list(bundle.names)
    path = Path(config.out_dir) / "optimum.json"
    io.write_json(str(path), payload)
    logger.info(f"✅ Optimum {result.worst_value:.6g} at x*={np.round(result.x_star, 6).tolist()} "
                f"written to {path}")
    return 0


def cmd_sensitivity(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    bundle = io.load_model(args.model)
    out = Path(config.out_dir)
    for name, curve in service.sensitivity(bundle, config.sensitivity_vars):
        io.write_effect_csv(str(out / f"effect_{name}.csv"), curve.levels, curve.t, curve.effect)
    return 0


def cmd_benchmark(args: argparse.Namespace, config: ProjectConfig) -> int:
    service = PipelineService(config)
    rows = service.benchmark(config.benchmark_sizes(), config.bench_repetitions)
    path = Path(config.out_dir) / "timing.csv"
    io.write_timing_csv(str(path), rows)
    logger.info(f"✅ {len(rows)} timing row(s) written to {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("DEBUG" if args.verbose else settings.log_level, settings.log_format, settings.log_file)
    try:
        config = load_config(args)
        logger.info(f"🚀 funkrig {args.command}")
        return args.handler(args, config)
    except FunkrigError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return exc.exit_code
    except ValueError as exc:
        logger.error(f"❌ Invalid input: {exc}")
        return 2
