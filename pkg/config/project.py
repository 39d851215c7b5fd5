"""
Project configuration: a flat key=value file describing one analysis.

Lists are comma separated. Variables are written name:continuous:lo:hi or
name:categorical:levels; x-basis candidates are variable:power pairs with
1-based variable numbers.
"""

import io
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from config.settings import settings
from src.kriging.corr import VariableSpec
from src.utils.errors import ConfigError

LIST_FIELDS = ("variables", "t_candidates", "x_candidates", "max_vars", "probes", "sensitivity_vars",
               "gen_alphas", "gen_mu", "gen_t_terms", "gen_x_terms", "bench_sizes")


def _split(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _parse_variable(text: str) -> VariableSpec:
    parts = text.split(":")
    if len(parts) == 4 and parts[1] == "continuous":
        return VariableSpec.continuous(parts[0], float(parts[2]), float(parts[3]))
    if len(parts) == 3 and parts[1] == "categorical":
        return VariableSpec.categorical(parts[0], int(parts[2]))
    raise ValueError(f"variable '{text}' must be name:continuous:lo:hi or name:categorical:levels")


def _parse_term(text: str) -> Tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(f"basis term '{text}' must be variable:power")
    var, power = int(parts[0]), int(parts[1])
    if var < 1 or power < 1:
        raise ValueError(f"basis term '{text}' needs a 1-based variable and a positive power")
    return var, power


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


class ProjectConfig(BaseModel):
    """Paths, model choices, EM and optimizer options of one analysis."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Data
    design_path: Optional[str] = None
    profile_path: Optional[str] = None
    variables: List[str] = []
    out_dir: str = "out"
    seed: Optional[int] = None

    # Model
    t_candidates: List[int] = [1, 2]
    x_candidates: Optional[List[str]] = None
    d: int = 1
    nugget: float = settings.default_nugget
    transform: bool = False
    fit_restarts: int = 5
    fit_max_evals: int = 2000
    kappa: float = 0.05

    # EM
    em_q: int = 10
    em_delta: float = 0.05
    em_max_iter: int = 100
    em_mode: str = "expectation"
    em_seed: Optional[int] = None
    em_strict: bool = False

    # Analysis
    probes: List[int] = []
    opt_restarts: int = 20
    opt_max_evals: int = 2000
    opt_refine: int = 1
    max_vars: List[str] = []
    sensitivity_vars: List[str] = []
    mc_nodes: int = 256

    # Synthetic generation
    gen_design: str = "lhs"
    gen_n: int = 30
    gen_m: int = 40
    gen_p: int = 2
    gen_t_min: float = 0.0
    gen_t_max: float = 1.0
    gen_alphas: List[float] = [2.0, 2.0]
    gen_beta: float = 3.0
    gen_sigma2: float = 1.0
    gen_mu: List[float] = [0.0]
    gen_t_terms: List[int] = []
    gen_x_terms: List[str] = []
    gen_keep_lo: float = 1.0
    gen_keep_hi: float = 1.0

    # Benchmark
    bench_sizes: List[str] = ["10x10", "30x32", "30x64"]
    bench_repetitions: int = 3

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split(value)

    @field_validator("variables")
    @classmethod
    def check_variables(cls, value: List[str]) -> List[str]:
        for text in value:
            _parse_variable(text)
        return value

    @field_validator("x_candidates", "gen_x_terms")
    @classmethod
    def check_terms(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        for text in value or []:
            _parse_term(text)
        return value

    @field_validator("d")
    @classmethod
    def check_d(cls, value: int) -> int:
        if value not in (1, 2):
            raise ValueError("d must be 1 or 2")
        return value

    @field_validator("em_mode")
    @classmethod
    def check_mode(cls, value: str) -> str:
        if value not in ("expectation", "sampling"):
            raise ValueError("em_mode must be expectation or sampling")
        return value

    @field_validator("gen_design")
    @classmethod
    def check_design(cls, value: str) -> str:
        if value not in ("lhs", "blhd"):
            raise ValueError("gen_design must be lhs or blhd")
        return value

    @field_validator("bench_sizes")
    @classmethod
    def check_sizes(cls, value: List[str]) -> List[str]:
        for text in value:
            parts = text.lower().split("x")
            if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
                raise ValueError(f"benchmark size '{text}' must be NxM")
        return value

    @field_validator("nugget", "em_delta", "kappa", "gen_sigma2")
    @classmethod
    def check_positive(cls, value: float, info) -> float:
        if info.field_name == "nugget" and value < 0:
            raise ValueError("nugget must be nonnegative")
        if info.field_name != "nugget" and value <= 0:
            raise ValueError(f"{info.field_name} must be positive")
        return value

    @model_validator(mode="after")
    def check_references(self) -> "ProjectConfig":
        if not 0 < self.gen_keep_lo <= self.gen_keep_hi <= 1:
            raise ValueError("gen_keep_lo/gen_keep_hi must satisfy 0 < lo <= hi <= 1")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.variables:
            names = {spec.name for spec in self.variable_specs()}
            for name in self.max_vars + self.sensitivity_vars:
                if name not in names:
                    raise ValueError(f"variable '{name}' is not declared in variables")
            for var, _ in self.x_terms() or []:
                if var >= len(names):
                    raise ValueError(f"basis term refers to variable {var + 1} of {len(names)}")
        return self

    # ------------------------------------------------------------------
    # Typed views
    # ------------------------------------------------------------------

    def variable_specs(self) -> Tuple[VariableSpec, ...]:
        return tuple(_parse_variable(text) for text in self.variables)

    def x_terms(self) -> Optional[List[Tuple[int, int]]]:
        """x-basis candidates as 0-based (variable, power) pairs; None means the default."""
        if self.x_candidates is None:
            return None
        return [(var - 1, power) for var, power in map(_parse_term, self.x_candidates)]

    def generator_x_terms(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((var - 1, power) for var, power in map(_parse_term, self.gen_x_terms))

    def benchmark_sizes(self) -> List[Tuple[int, int]]:
        return [tuple(int(p) for p in text.lower().split("x")) for text in self.bench_sizes]

    # ------------------------------------------------------------------
    # Text form
    # ------------------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for name, value in self.model_dump().items():
            if value is None:
                continue
            lines.append(f"{name}={_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ProjectConfig":
        """
        Parse a key=value document.

        Raises:
            ConfigError: unknown key or invalid value, naming the field and its line
        """
        lines = _key_lines(text)
        values = dotenv_values(stream=io.StringIO(text), interpolate=False)
        data = {key: value for key, value in values.items() if value is not None}
        try:
            return cls(**data)
        except ValidationError as exc:
            error = exc.errors()[0]
            field = str(error["loc"][0]) if error["loc"] else None
            line = lines.get(field) if field else None
            raise ConfigError(error["msg"], field=field, line=line) from exc

    @classmethod
    def load(cls, path: str) -> "ProjectConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.loads(text)

    def save(self, path: str) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def with_overrides(self, **changes: Any) -> "ProjectConfig":
        """Copy with the given keys replaced; None values leave a key untouched."""
        data = self.model_dump()
        data.update({key: value for key, value in changes.items() if value is not None})
        try:
            return ProjectConfig(**data)
        except ValidationError as exc:
            error = exc.errors()[0]
            field = str(error["loc"][0]) if error["loc"] else None
            raise ConfigError(error["msg"], field=field) from exc


def _key_lines(text: str) -> Dict[str, int]:
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#") or "=" not in stripped:
            continue
        key = stripped.split("=", 1)[0].strip()
        if key.startswith("export "):
            key = key[len("export "):].strip()
        lines.setdefault(key, number)
    return lines
