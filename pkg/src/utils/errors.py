"""
Exception hierarchy for funkrig.

Input problems map to CLI exit code 2, numeric failures to exit code 3.
"""

from typing import Any, Optional


class FunkrigError(Exception):
    """Base class for all library errors."""

    exit_code = 1


# ----------------------------------------------------------------------
# Input errors (exit code 2)
# ----------------------------------------------------------------------

class InputError(FunkrigError):
    exit_code = 2


class ConfigError(InputError):
    """Invalid project configuration; names the field and, when known, the line."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class DataError(InputError):
    """Malformed data file; names the offending run / point when possible."""

    def __init__(self, message: str, run_id: Optional[int] = None, point: Optional[Any] = None):
        self.run_id = run_id
        self.point = point
        where = []
        if run_id is not None:
            where.append(f"run {run_id}")
        if point is not None:
            where.append(f"t={point}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class InvalidGrid(InputError):
    """Abscissae not strictly increasing."""


class DimensionMismatch(InputError):
    """Array shapes do not conform."""


class SizeCapExceeded(InputError):
    """Dense reference computation refused: problem larger than its cap."""


# ----------------------------------------------------------------------
# Numeric errors (exit code 3)
# ----------------------------------------------------------------------

class NumericError(FunkrigError):
    exit_code = 3


class SingularMatrix(NumericError):
    """Cholesky factorization failed."""


class NumericalBreakdown(NumericError):
    """A pivot fell below the breakdown threshold."""


class NotPositiveDefinite(NumericError):
    """A precision combination failed its eigenvalue floor."""


class RankDeficientBasis(NumericError):
    """The GLS normal matrix is singular."""


class OptimFailed(NumericError):
    """Every optimizer start failed; carries the best point seen so far."""

    def __init__(self, message: str, best: Optional[Any] = None):
        self.best = best
        super().__init__(message)


class MaxIterReached(NumericError):
    """EM hit max_iter without meeting its tolerance (strict mode only)."""

    def __init__(self, message: str, result: Optional[Any] = None):
        self.result = result
        super().__init__(message)
