"""
Synthetic functional data from the kriging model itself: Latin hypercube or
bundled BLHD designs, Kronecker-factored Gaussian process draws and per-run
tail truncation.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from src.kriging.corr import CorrParams, Design, VariableSpec, build_R_x, corr_t
from src.kriging.dataset import FunctionalDataset
from src.kriging.kron_kriging import BasisSpec, effective_t_nugget
from src.utils.errors import DataError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
BLHD_FILE = DATA_DIR / "blhd_30run.json"


@dataclass
class TruthSpec:
    """Known model used to generate a synthetic instance."""
    n: int = 30
    m: int = 40
    p: int = 2
    t_range: Tuple[float, float] = (0.0, 1.0)
    alphas: Sequence[float] = (2.0, 2.0)
    beta: float = 3.0
    d: int = 1
    sigma2: float = 1.0
    mu: Sequence[float] = (0.0,)
    t_terms: Tuple[int, ...] = ()
    x_terms: Tuple[Tuple[int, int], ...] = ()
    keep_range: Tuple[float, float] = (1.0, 1.0)
    design: str = "lhs"
    nugget: float = 0.0

    def basis(self, grid: np.ndarray) -> BasisSpec:
        return BasisSpec.for_grid(grid, self.t_terms, self.x_terms)

    def params(self) -> CorrParams:
        return CorrParams(alphas=np.asarray(self.alphas, dtype=float), beta=self.beta, d=self.d, nugget=self.nugget)


@dataclass
class GeneratedData:
    dataset: FunctionalDataset
    truth: np.ndarray
    grid: np.ndarray
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def latin_hypercube(n: int, p: int, seed: Optional[int] = None) -> Design:
    """n-run Latin hypercube over [0, 1]^p."""
    sampler = qmc.LatinHypercube(d=p, seed=seed)
    return Design.from_array(sampler.random(n))


def load_blhd_design(path: Path = BLHD_FILE) -> Design:
    """The bundled 30-run branching Latin hypercube design (level codes)."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise DataError(f"BLHD fixture not found at {path}")
    variables = tuple(VariableSpec.from_dict(v) for v in data["variables"])
    return Design(rows=np.asarray(data["rows"], dtype=float), variables=variables)


def sample_profiles(design: Design, grid: np.ndarray, basis: BasisSpec, mu: np.ndarray, sigma2: float,
                    params: CorrParams, rng: np.random.Generator) -> np.ndarray:
    """
    One draw of the n x m response matrix: trend + sigma L_x E L_t'.

    L_x and L_t are Cholesky factors of R_X and R_t, so vec(Y) has covariance
    sigma2 R_X kron R_t.
    """
    grid = np.asarray(grid, dtype=float)
    Lx = build_R_x(design, params).lower
    Rt = corr_t(grid, grid, params.beta, params.d)
    Rt[np.diag_indices_from(Rt)] += effective_t_nugget(grid, params)
    Lt = linalg.cholesky(Rt + 1e-12 * np.eye(grid.size), lower=True)
    E = rng.standard_normal((design.n, grid.size))
    trend = (basis.rows(design.scaled(), grid) @ np.asarray(mu, dtype=float)).reshape(design.n, grid.size)
    return trend + np.sqrt(sigma2) * Lx @ E @ Lt.T


def truncate_tails(Y: np.ndarray, grid: np.ndarray, keep_range: Tuple[float, float],
                   rng: np.random.Generator) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Keep the leading fraction f ~ U(lo, hi) of every profile (at least one point)."""
    lo, hi = keep_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"keep fraction range must satisfy 0 < lo <= hi <= 1, got {keep_range}")
    m = grid.size
    fractions = rng.uniform(lo, hi, Y.shape[0])
    keep = np.clip(np.round(fractions * m).astype(int), 1, m)
    profiles = [(grid[:k], Y[i, :k]) for i, k in enumerate(keep)]
    return profiles, keep


def generate(spec: TruthSpec, seed: Optional[int] = None) -> GeneratedData:
    """Design, regular-grid truth and (possibly truncated) observed dataset."""
    rng = np.random.default_rng(seed)
    if spec.design == "blhd":
        design = load_blhd_design()
    else:
        design = latin_hypercube(spec.n, spec.p, seed)
    grid = np.linspace(spec.t_range[0], spec.t_range[1], spec.m)
    params = spec.params()
    if params.p != design.p:
        raise DataError(f"{params.p} alphas for a {design.p}-variable design")
    truth = sample_profiles(design, grid, spec.basis(grid), np.asarray(spec.mu, dtype=float), spec.sigma2,
                            params, rng)
    profiles, keep = truncate_tails(truth, grid, spec.keep_range, rng)
    dataset = FunctionalDataset.from_profiles(design, profiles)
    logger.info(f"✅ Generated n={design.n}, m={grid.size}, regular={dataset.is_regular}, "
                f"observed {dataset.total_points}/{truth.size} points")
    return GeneratedData(dataset=dataset, truth=truth, grid=grid, keep=keep)
