"""
File formats: design, profile, query and result CSVs, the versioned model
file and the plain-text fit report.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src import __version__
from src.kriging.corr import CorrParams, Design, VariableSpec
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, KrigingModel, build_model
from src.kriging.stage1 import DecayTransform
from src.utils.errors import DataError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "funkrig-model"
MODEL_VERSION = 1
PROFILE_COLUMNS = ["run_id", "t", "y"]
LOO_COLUMNS = ["run_id", "t", "y", "y_hat", "lo", "hi"]
TIMING_COLUMNS = ["n", "m", "path", "median_seconds", "value"]


def _read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty (a header row is required)")
    except pd.errors.ParserError as exc:
        raise DataError(f"{path} is not valid CSV: {exc}")


def _check_columns(frame: pd.DataFrame, expected: Sequence[str], path: str) -> pd.DataFrame:
    """Reject unknown or missing columns; returns the expected columns in order."""
    columns = [str(c).strip() for c in frame.columns]
    unknown = [c for c in columns if c not in expected]
    missing = [c for c in expected if c not in columns]
    if unknown or missing:
        raise DataError(f"{path}: expected columns {list(expected)}; unknown {unknown}, missing {missing}")
    frame.columns = columns
    return frame[list(expected)].copy()


def _numeric(frame: pd.DataFrame, path: str) -> None:
    for column in frame.columns:
        values = pd.to_numeric(frame[column], errors="coerce")
        if values.isna().any():
            row = int(np.flatnonzero(values.isna().to_numpy())[0])
            raise DataError(f"{path}: non-numeric or missing value in column '{column}' at data row {row + 1}")
        frame[column] = values.astype(float)


def _write(frame: pd.DataFrame, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


# ----------------------------------------------------------------------
# Design and profiles
# ----------------------------------------------------------------------

def read_design_csv(path: str, variables: Sequence[VariableSpec] = ()) -> Design:
    """
    Design CSV: header row of variable names, one row per run.

    Without declared variables every column is continuous over its observed range.
    """
    frame = _read_csv(path)
    if variables:
        frame = _check_columns(frame, [spec.name for spec in variables], path)
    _numeric(frame, path)
    rows = frame.to_numpy(dtype=float)
    if not variables:
        variables = []
        for k, name in enumerate(frame.columns):
            lo, hi = float(rows[:, k].min()), float(rows[:, k].max())
            if not hi > lo:
                raise DataError(f"{path}: column '{name}' is constant; declare its range in the config")
            variables.append(VariableSpec.continuous(str(name), lo, hi))
    try:
        return Design(rows=rows, variables=tuple(variables))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}")


def write_design_csv(design: Design, path: str) -> None:
    _write(pd.DataFrame(np.asarray(design.rows), columns=list(design.names)), path)


def read_profiles_csv(path: str, design: Design) -> FunctionalDataset:
    """
    Long-format profile CSV (run_id, t, y).

    Raises:
        DataError: unknown columns, run ids not contiguous from 1, duplicate
            (run_id, t) pairs, or t not strictly increasing within a run
    """
    frame = _read_csv(path)
    frame = _check_columns(frame, PROFILE_COLUMNS, path)
    _numeric(frame, path)
    ids = frame["run_id"].to_numpy()
    if np.any(ids != np.round(ids)):
        raise DataError(f"{path}: run_id values must be integers")
    frame["run_id"] = ids.astype(int)

    present = np.unique(frame["run_id"].to_numpy())
    expected = np.arange(1, design.n + 1)
    if present.size != expected.size or np.any(present != expected):
        raise DataError(f"{path}: run ids must be contiguous 1..{design.n} (one per design row), "
                        f"found {present.min()}..{present.max()} with {present.size} distinct")

    duplicated = frame.duplicated(subset=["run_id", "t"])
    if duplicated.any():
        row = frame[duplicated].iloc[0]
        raise DataError("duplicate t", run_id=int(row["run_id"]), point=float(row["t"]))

    profiles: List[Tuple[np.ndarray, np.ndarray]] = []
    for run_id, group in frame.groupby("run_id", sort=True):
        t = group["t"].to_numpy()
        steps = np.diff(t)
        if np.any(steps <= 0):
            j = int(np.flatnonzero(steps <= 0)[0]) + 1
            raise DataError("t not strictly increasing", run_id=int(run_id), point=float(t[j]))
        profiles.append((t, group["y"].to_numpy()))
    return FunctionalDataset.from_profiles(design, profiles)


def write_profiles_csv(dataset: FunctionalDataset, path: str) -> None:
    rows = [(i + 1, t, y) for i, run in enumerate(dataset.runs) for t, y in zip(run.t, run.y)]
    _write(pd.DataFrame(rows, columns=PROFILE_COLUMNS), path)


def write_truth_csv(grid: np.ndarray, truth: np.ndarray, path: str) -> None:
    n, m = truth.shape
    frame = pd.DataFrame({
        "run_id": np.repeat(np.arange(1, n + 1), m),
        "t": np.tile(grid, n),
        "y": truth.reshape(-1),
    })
    _write(frame, path)


# ----------------------------------------------------------------------
# Queries and results
# ----------------------------------------------------------------------

def read_query_csv(path: str, names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Query CSV with the design's variable columns plus t; returns (X, t)."""
    columns = list(names) + ["t"]
    frame = _read_csv(path)
    frame = _check_columns(frame, columns, path)
    if frame.empty:
        return np.zeros((0, len(names))), np.zeros(0)
    _numeric(frame, path)
    return frame[list(names)].to_numpy(dtype=float), frame["t"].to_numpy(dtype=float)


def write_predictions_csv(path: str, names: Sequence[str], X: np.ndarray, t: np.ndarray, y_hat: np.ndarray,
                          lo: np.ndarray, hi: np.ndarray, extrapolated: np.ndarray) -> None:
    frame = pd.DataFrame(np.asarray(X, dtype=float).reshape(-1, len(names)), columns=list(names))
    frame["t"] = np.asarray(t, dtype=float)
    frame["y_hat"] = y_hat
    frame["lo"] = lo
    frame["hi"] = hi
    frame["extrapolated"] = np.asarray(extrapolated, dtype=bool)
    _write(frame, path)


def write_loo_csv(path: str, rows: List[Dict[str, Any]]) -> None:
    frame = pd.DataFrame(rows, columns=LOO_COLUMNS)
    _write(frame, path)


def write_effect_csv(path: str, levels: np.ndarray, t: np.ndarray, effect: np.ndarray) -> None:
    frame = pd.DataFrame({
        "level": np.repeat(levels, t.size),
        "t": np.tile(t, levels.size),
        "effect": np.asarray(effect).reshape(-1),
    })
    _write(frame, path)


def write_timing_csv(path: str, rows: List[Dict[str, Any]]) -> None:
    _write(pd.DataFrame(rows, columns=TIMING_COLUMNS), path)


def write_json(path: str, payload: Dict[str, Any]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


# ----------------------------------------------------------------------
# Model file
# ----------------------------------------------------------------------

@dataclass
class ModelBundle:
    """
    A fitted model with everything needed to predict on the original scale.

    The kriging model lives on the transformed scale; outputs are mapped back
    with the decay transform.
    """
    model: KrigingModel
    transform: DecayTransform = field(default_factory=DecayTransform)
    mask: Optional[np.ndarray] = None
    em: Optional[Dict[str, Any]] = None
    stage1: Dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> Tuple[str, ...]:
        return self.model.design.names

    @property
    def is_regular(self) -> bool:
        return self.mask is None or bool(np.all(self.mask))

    def predict_points(self, X: np.ndarray, T: np.ndarray) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return self.transform.inverse(T, self.model.predict_points(X, T))

    def predict_ci_points(self, X: np.ndarray, T: np.ndarray, kappa: float = 0.05
                          ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        y_hat, lo, hi = self.model.predict_ci_points(X, T, kappa)
        return (self.transform.inverse(T, y_hat), self.transform.inverse(T, lo),
                self.transform.inverse(T, hi))

    def to_dict(self) -> Dict[str, Any]:
        model = self.model
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "funkrig": __version__,
            "variables": [spec.to_dict() for spec in model.design.variables],
            "design": np.asarray(model.design.rows).tolist(),
            "grid": model.grid.tolist(),
            "completed": model.Y.tolist(),
            "mask": None if self.mask is None else self.mask.astype(int).tolist(),
            "basis": model.basis.to_dict(),
            "params": model.params.to_dict(),
            "mu": model.mu.tolist(),
            "sigma2": model.sigma2,
            "neg_loglik": model.neg_loglik,
            "transform": {"lam": self.transform.lam, "poly": list(self.transform.poly)},
            "em": self.em,
            "stage1": self.stage1,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelBundle":
        if data.get("format") != MODEL_FORMAT:
            raise DataError("not a funkrig model file")
        if data.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model file version {data.get('version')} (supported: {MODEL_VERSION})")
        try:
            variables = tuple(VariableSpec.from_dict(v) for v in data["variables"])
            rows = np.asarray(data["design"], dtype=float).reshape(len(data["design"]), len(variables))
            design = Design(rows=rows, variables=variables)
            grid = np.asarray(data["grid"], dtype=float)
            Y = np.asarray(data["completed"], dtype=float)
            basis = BasisSpec.from_dict(data["basis"])
            params = CorrParams.from_dict(data["params"])
            transform = DecayTransform(lam=data["transform"]["lam"], poly=tuple(data["transform"]["poly"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed model file: {exc}")
        model = build_model(design, grid, Y, basis, params)
        # sampling-mode fits carry a Monte-Carlo scatter term in sigma2
        model = replace(model, sigma2=float(data["sigma2"]), neg_loglik=float(data["neg_loglik"]))
        mask = None if data.get("mask") is None else np.asarray(data["mask"], dtype=bool)
        return cls(model=model, transform=transform, mask=mask, em=data.get("em"), stage1=data.get("stage1") or {})


def save_model(bundle: ModelBundle, path: str) -> None:
    write_json(path, bundle.to_dict())
    logger.info(f"✅ Model saved to {path}")


def load_model(path: str) -> ModelBundle:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}")
    return ModelBundle.from_dict(data)


# ----------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------

def format_report(bundle: ModelBundle, dataset: FunctionalDataset) -> str:
    """Human-readable parameter table, EM history and contraction diagnostics."""
    model = bundle.model
    names = list(model.design.names)
    lines = [
        f"funkrig {__version__} fit report",
        "",
        f"grid: {'regular' if dataset.is_regular else 'irregular'}",
        f"runs: {dataset.n}",
        f"grid points: {model.m}",
        f"observed points: {dataset.total_points} of {model.n * model.m}",
        f"decay transform: lambda={bundle.transform.lam:.6g}",
        "",
        "parameters:",
    ]
    for label, value in zip(model.basis.labels(names), model.mu):
        lines.append(f"  mu[{label}] = {value:.6g}")
    lines.append(f"  sigma2 = {model.sigma2:.6g}")
    for name, alpha in zip(names, model.params.alphas):
        lines.append(f"  alpha[{name}] = {alpha:.6g}")
    lines.append(f"  beta = {model.params.beta:.6g}")
    lines.append(f"  d = {model.params.d}")
    lines.append(f"  nugget = {model.params.nugget:.3g}")
    lines.append(f"  objective = {model.neg_loglik:.6f}")

    if bundle.stage1:
        lines += ["", "stage one:"]
        for key, value in bundle.stage1.items():
            lines.append(f"  {key}: {value}")

    if bundle.em is not None:
        em = bundle.em
        deltas = em.get("param_deltas", [])
        lines += [
            "",
            "EM:",
            f"  mode: {em['mode']}",
            f"  sweeps per iteration: {em['q']}",
            f"  iterations: {em['iterations']}",
            f"  converged: {'yes' if em['converged'] else 'no'}",
            f"  final max-delta: {deltas[-1] if deltas else 0.0:.6g}",
            "  history:",
        ]
        lines += [f"    {k + 1:3d}  {delta:.6g}" for k, delta in enumerate(deltas)]
        prop2 = np.asarray(em.get("prop2", []), dtype=float)
        if prop2.size:
            lines.append("  contraction check (per run, < 1 contracts):")
            lines += [f"    run {i + 1}: {value:.4f}" for i, value in enumerate(prop2) if value > 0]
            lines.append(f"    max: {float(np.max(prop2)):.4f}")
    return "\n".join(lines) + "\n"


def write_report(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")
