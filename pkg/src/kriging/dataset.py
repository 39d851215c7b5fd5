"""
Functional dataset: per-run abscissae and responses over a design.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.kriging.corr import Design, validate_grid
from src.utils.errors import DataError, DimensionMismatch, InvalidGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Run:
    """Observed profile of one run: strictly increasing t with matching y."""
    t: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.t.size


@dataclass(frozen=True)
class FunctionalDataset:
    """
    Design plus one observed profile per run.

    The union grid is the sorted union of every run's abscissae; the dataset is
    regular when every run is observed on the whole union grid.
    """
    design: Design
    runs: Tuple[Run, ...]

    def __post_init__(self):
        runs = []
        for i, run in enumerate(self.runs):
            t = np.asarray(run.t, dtype=float).reshape(-1)
            y = np.asarray(run.y, dtype=float).reshape(-1)
            if t.size != y.size:
                raise DataError(f"{t.size} abscissae but {y.size} responses", run_id=i + 1)
            if t.size:
                try:
                    validate_grid(t)
                except InvalidGrid as exc:
                    raise InvalidGrid(f"Run {i + 1}: {exc}")
            if not np.all(np.isfinite(y)):
                j = int(np.argmax(~np.isfinite(y)))
                raise DataError("non-finite response", run_id=i + 1, point=t[j])
            t.setflags(write=False)
            y.setflags(write=False)
            runs.append(Run(t=t, y=y))
        if len(runs) != self.design.n:
            raise DimensionMismatch(f"{len(runs)} profiles for a {self.design.n}-run design")
        object.__setattr__(self, "runs", tuple(runs))

    @classmethod
    def from_profiles(cls, design: Design, profiles: Sequence[Tuple[np.ndarray, np.ndarray]]) -> "FunctionalDataset":
        return cls(design=design, runs=tuple(Run(t=t, y=y) for t, y in profiles))

    @classmethod
    def from_matrix(cls, design: Design, grid: np.ndarray, Y: np.ndarray,
                    mask: Optional[np.ndarray] = None) -> "FunctionalDataset":
        """Build from an n x m response matrix; mask selects the observed cells."""
        grid = np.asarray(grid, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (design.n, grid.size):
            raise DimensionMismatch(f"Response matrix {Y.shape} does not match ({design.n}, {grid.size})")
        if mask is None:
            mask = np.ones(Y.shape, dtype=bool)
        profiles = [(grid[mask[i]], Y[i, mask[i]]) for i in range(design.n)]
        return cls.from_profiles(design, profiles)

    @property
    def n(self) -> int:
        return len(self.runs)

    @property
    def total_points(self) -> int:
        return int(sum(run.size for run in self.runs))

    @property
    def union_grid(self) -> np.ndarray:
        sizes = [run.t for run in self.runs if run.size]
        if not sizes:
            return np.zeros(0)
        return np.unique(np.concatenate(sizes))

    @property
    def is_regular(self) -> bool:
        m = self.union_grid.size
        return all(run.size == m for run in self.runs)

    def positions(self, i: int, grid: Optional[np.ndarray] = None) -> np.ndarray:
        """Indices of run i's abscissae inside a grid (the union grid by default)."""
        grid = self.union_grid if grid is None else np.asarray(grid, dtype=float)
        t = self.runs[i].t
        idx = np.searchsorted(grid, t)
        if np.any(idx >= grid.size) or np.any(grid[np.minimum(idx, grid.size - 1)] != t):
            raise DataError("abscissae not on the completion grid", run_id=i + 1)
        return idx

    def observed_mask(self, grid: Optional[np.ndarray] = None) -> np.ndarray:
        grid = self.union_grid if grid is None else np.asarray(grid, dtype=float)
        mask = np.zeros((self.n, grid.size), dtype=bool)
        for i in range(self.n):
            mask[i, self.positions(i, grid)] = True
        return mask

    def matrix(self, grid: Optional[np.ndarray] = None, fill: float = np.nan) -> np.ndarray:
        """n x m matrix of observed responses; unobserved cells hold `fill`."""
        grid = self.union_grid if grid is None else np.asarray(grid, dtype=float)
        out = np.full((self.n, grid.size), fill, dtype=float)
        for i, run in enumerate(self.runs):
            out[i, self.positions(i, grid)] = run.y
        return out

    def run_means(self) -> np.ndarray:
        return np.array([run.y.mean() if run.size else np.nan for run in self.runs])

    def subset(self, indices: Sequence[int]) -> "FunctionalDataset":
        indices = list(indices)
        return FunctionalDataset(design=self.design.subset(indices), runs=tuple(self.runs[k] for k in indices))

    def without(self, i: int) -> "FunctionalDataset":
        return self.subset([k for k in range(self.n) if k != i])

    def with_responses(self, responses: List[np.ndarray]) -> "FunctionalDataset":
        """Same design and abscissae, new response vectors."""
        return FunctionalDataset(
            design=self.design,
            runs=tuple(Run(t=run.t, y=np.asarray(y, dtype=float)) for run, y in zip(self.runs, responses)),
        )

    def common_grid(self) -> np.ndarray:
        """Abscissae observed by every run."""
        common = self.runs[0].t
        for run in self.runs[1:]:
            common = np.intersect1d(common, run.t, assume_unique=True)
        return common

    def truncate_to_common(self) -> "FunctionalDataset":
        """Regular dataset keeping only the abscissae shared by all runs."""
        common = self.common_grid()
        if common.size == 0:
            raise DataError("runs share no common abscissae")
        profiles = []
        for run in self.runs:
            keep = np.isin(run.t, common)
            profiles.append((run.t[keep], run.y[keep]))
        logger.debug(f"Truncated to common grid: {common.size} of {self.union_grid.size} points")
        return FunctionalDataset.from_profiles(self.design, profiles)
