"""
Fold-based selection of forest parameters and penalty strength.

Grids are ordered from most to least regularized. The selected pair is the
most regularized one whose mean held-out loss lies within ``tol`` standard
errors of the best pair.
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from loguru import logger

from src.core.bounds import SampleSet
from src.core.forest import ForestParams, WeightMatrix, extract_weights, fit_poly_forest
from src.core.locpol import penalized_locpol
from src.utils.numeric import check_level, fail, fold_indices

SQUARED = "squared"
PINBALL = "pinball"

DEFAULT_PENALTIES = (10.0, 1.0, 0.1, 0.01, 0.001, 0.0)
DEFAULT_IMPURITY_TOLS = (100.0, 10.0, 1.0, 0.1, 0.01)


def default_forest_grid(base: ForestParams = ForestParams()) -> Tuple[ForestParams, ...]:
    """Forests that differ only in impurity_tol, most regularized first."""
    return tuple(base.replace(impurity_tol=tol) for tol in DEFAULT_IMPURITY_TOLS)


@dataclass(frozen=True)
class TuningGrid:
    """Candidate forest settings and penalties, both ordered by decreasing regularization."""

    forest_params: Tuple[ForestParams, ...] = field(default_factory=default_forest_grid)
    penalties: Tuple[float, ...] = DEFAULT_PENALTIES
    tol: float = 1.0
    folds: int = 5
    loss: str = SQUARED
    quantile_level: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "forest_params", tuple(self.forest_params))
        object.__setattr__(self, "penalties", tuple(float(lam) for lam in self.penalties))
        if not self.forest_params or not self.penalties:
            fail("tuning grid needs at least one forest setting and one penalty")
        penalties = np.asarray(self.penalties)
        if np.any(penalties < 0) or not np.all(np.isfinite(penalties)):
            fail("penalties must be finite and non-negative")
        if np.any(np.diff(penalties) >= 0):
            fail(f"penalties must be strictly decreasing, got {self.penalties}")
        if np.isnan(self.tol) or self.tol < 0:
            fail(f"tol must be non-negative, got {self.tol}")
        if int(self.folds) < 2:
            fail(f"need at least 2 folds, got {self.folds}")
        if self.loss not in (SQUARED, PINBALL):
            fail(f"unknown loss '{self.loss}'")
        check_level("quantile_level", self.quantile_level)

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.forest_params), len(self.penalties)


class TuningResult(NamedTuple):
    forest_params: ForestParams
    penalty: float
    mean_losses: np.ndarray
    index: Tuple[int, int]


def pointwise_loss(predictions, targets, loss: str = SQUARED, quantile_level: float = 0.5) -> np.ndarray:
    """Per-sample loss of predictions against the pilot values."""
    residual = np.asarray(targets, dtype=np.float64) - np.asarray(predictions, dtype=np.float64)
    if loss == SQUARED:
        return residual ** 2
    if loss == PINBALL:
        return np.maximum(quantile_level * residual, (quantile_level - 1.0) * residual)
    fail(f"unknown loss '{loss}'")


def select_parameters(losses, tol: float) -> Tuple[int, int]:
    """
    Most regularized grid cell within tol standard errors of the best.

    Args:
        losses: (K, L, n) per-sample losses, cells ordered by decreasing regularization
        tol (float): Number of standard errors tolerated

    Returns:
        Tuple[int, int]: 0-based (k, l) of the selected cell
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 3 or 0 in losses.shape:
        fail(f"losses must be a non-empty (K, L, n) array, got shape {losses.shape}")
    n = losses.shape[2]
    means = losses.mean(axis=2)
    # Flat argmin picks the lexicographically smallest cell on ties
    k_best, l_best = np.unravel_index(int(np.argmin(means)), means.shape)
    # Standard error of the paired differences; a constant offset has none
    diff = losses[k_best, l_best][None, None, :] - losses
    spread = diff.std(axis=2) / np.sqrt(n)
    band = np.zeros_like(spread)
    np.multiply(tol, spread, out=band, where=spread > 0)
    admissible = means <= means[k_best, l_best] + band
    k_star = int(np.flatnonzero(admissible.any(axis=1))[0])
    l_star = int(np.flatnonzero(admissible[k_star])[0])
    return k_star, l_star


def heldout_losses(samples: SampleSet, weights: WeightMatrix, v, q: int, penalties: Sequence[float],
                   folds: List[np.ndarray], loss: str = SQUARED, quantile_level: float = 0.5) -> np.ndarray:
    """
    Held-out losses of the penalized fit for every penalty.

    Returns:
        np.ndarray: (L, n) per-sample losses
    """
    out = np.empty((len(penalties), samples.n))
    everything = np.arange(samples.n)
    for heldout in folds:
        retained = np.setdiff1d(everything, heldout)
        restricted = weights.restrict_columns(retained)
        for ell, lam in enumerate(penalties):
            fit = penalized_locpol(samples, restricted, v, q, lam)
            out[ell, heldout] = pointwise_loss(fit.fitted[heldout], samples.pilot[heldout], loss, quantile_level)
    return out


def tune(samples: SampleSet, v, grid: TuningGrid, q: int = 1, seed: int = 0, n_jobs: int = 1) -> TuningResult:
    """
    Select forest parameters and penalty for one direction.

    Args:
        samples (SampleSet): Covariates and pilot values
        v: Direction of length d
        grid (TuningGrid): Candidate settings
        q (int): Derivative order
        seed (int): Seed of the fold assignment
        n_jobs (int): Parallel workers over trees

    Returns:
        TuningResult: Selected forest parameters, penalty, (K, L) mean losses and the 0-based cell index
    """
    folds = fold_indices(samples.n, int(grid.folds), seed)
    n_forests, n_penalties = grid.shape
    losses = np.empty((n_forests, n_penalties, samples.n))
    for k, params in enumerate(grid.forest_params):
        forest = fit_poly_forest(samples, v, q, params, n_jobs=n_jobs)
        weights = extract_weights(forest, samples)
        losses[k] = heldout_losses(samples, weights, v, q, grid.penalties, folds, grid.loss, grid.quantile_level)
        logger.debug(f"tuning forest setting {k + 1}/{n_forests}: mean losses {losses[k].mean(axis=1)}")

    k_star, l_star = select_parameters(losses, grid.tol)
    logger.info(f"selected forest setting {k_star + 1} of {n_forests} and penalty {grid.penalties[l_star]}")
    return TuningResult(grid.forest_params[k_star], grid.penalties[l_star], losses.mean(axis=2), (k_star, l_star))
