"""
Inference products built on extrapolation bounds.

Worst-case optimal point predictions, prediction intervals from bounds on
conditional quantiles, percentile-bootstrap confidence intervals,
cross-validated residual scale and extrapolation scores, plus coverage
diagnostics for evaluating intervals outside the support.
"""
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from src.core.bounds import BoundTable, SampleSet
from src.core.exceptions import ComputationError, XtrapolationError
from src.core.forest import ForestParams, fit_regression_forest
from src.core.xtrapolation import Xtrapolation
from src.utils.numeric import (as_matrix, as_vector, check_level, empirical_quantile, fail, fold_indices,
                               spawn_seeds)

MAX_DROP_FRACTION = 0.2


def _frame(targets: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(targets, columns=[f"x{j + 1}" for j in range(targets.shape[1])])


@dataclass(frozen=True)
class IntervalTable:
    """Extrapolation-aware intervals at a set of targets."""

    targets: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    alpha: float
    n_crossed: int = 0

    def __post_init__(self):
        check_level("alpha", self.alpha)
        lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape or lo.shape[0] != np.asarray(self.targets).shape[0]:
            fail("interval columns must have one entry per target")
        if np.any(lo > hi):
            fail("interval lower ends must not exceed upper ends")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def m(self) -> int:
        return self.lo.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = _frame(np.asarray(self.targets))
        frame["lo"] = self.lo
        frame["hi"] = self.hi
        return frame


@dataclass(frozen=True)
class ScoreTable:
    """Extrapolation scores: bound width over the residual scale."""

    targets: np.ndarray
    score: np.ndarray
    sigma: float

    def to_frame(self) -> pd.DataFrame:
        frame = _frame(np.asarray(self.targets))
        frame["score"] = self.score
        return frame


class ConfidenceInterval(NamedTuple):
    lo: float
    hi: float
    n_dropped: int


def _check_shared_targets(first: BoundTable, second: BoundTable):
    if first.targets.shape != second.targets.shape or not np.array_equal(first.targets, second.targets):
        fail("bound tables must share their targets")


def midpoint_prediction(bounds: BoundTable) -> np.ndarray:
    """Worst-case optimal prediction (lower + upper) / 2 at every target."""
    return bounds.mid.copy()


def prediction_interval(lower_quantile_bounds: BoundTable, upper_quantile_bounds: BoundTable,
                        alpha: float) -> IntervalTable:
    """
    Prediction intervals from bounds on two conditional quantiles.

    Args:
        lower_quantile_bounds (BoundTable): Bounds computed on pilots of the alpha/2 quantile
        upper_quantile_bounds (BoundTable): Bounds computed on pilots of the 1 - alpha/2 quantile
        alpha (float): Nominal miscoverage level

    Returns:
        IntervalTable: [lower of the first table, upper of the second]; crossing
        ends are replaced by their average and counted in n_crossed
    """
    alpha = check_level("alpha", alpha)
    _check_shared_targets(lower_quantile_bounds, upper_quantile_bounds)
    lo = lower_quantile_bounds.lower.copy()
    hi = upper_quantile_bounds.upper.copy()
    crossed = lo > hi
    if np.any(crossed):
        logger.warning(f"quantile pilots cross at {int(crossed.sum())} of {crossed.size} targets, averaging")
        mid = (lo[crossed] + hi[crossed]) / 2.0
        lo[crossed] = mid
        hi[crossed] = mid
    return IntervalTable(lower_quantile_bounds.targets, lo, hi, alpha, int(crossed.sum()))


def _replicate(covariates, responses, pipeline, target, seed) -> Optional[Tuple[float, float]]:
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, covariates.shape[0], covariates.shape[0])
    try:
        table = pipeline(covariates[rows], responses[rows], target[None, :])
    except (XtrapolationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.debug(f"bootstrap replicate failed: {exc}")
        return None
    return float(table.lower[0]), float(table.upper[0])


def bootstrap_confidence_interval(covariates, responses, pipeline: Callable, target, alpha: float,
                                  B: int = 500, seed: int = 0, n_jobs: int = 1) -> ConfidenceInterval:
    """
    Percentile bootstrap confidence interval for the extrapolation bounds at one target.

    Args:
        covariates: (n, d) covariates
        responses: length-n raw responses
        pipeline (Callable): (covariates, responses, targets) -> BoundTable, rerun per resample
        target: Target point of length d
        alpha (float): Miscoverage level
        B (int): Number of bootstrap replicates
        seed (int): Seed of the resampling
        n_jobs (int): Parallel workers over replicates

    Returns:
        ConfidenceInterval: alpha/2 quantile of the lower bounds, 1 - alpha/2 quantile
        of the upper bounds and the number of dropped replicates
    """
    alpha = check_level("alpha", alpha)
    if int(B) < 2:
        fail(f"need at least 2 bootstrap replicates, got {B}")
    X = as_matrix("covariates", covariates)
    y = as_vector("responses", responses, length=X.shape[0])
    target = as_vector("target", target, length=X.shape[1])

    results = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(X, y, pipeline, target, child) for child in spawn_seeds(seed, int(B))
    )
    kept = [r for r in results if r is not None]
    n_dropped = int(B) - len(kept)
    if n_dropped:
        logger.warning(f"dropped {n_dropped} of {B} bootstrap replicates")
    if n_dropped > MAX_DROP_FRACTION * int(B) or not kept:
        msg = f"{n_dropped} of {B} bootstrap replicates failed, more than {MAX_DROP_FRACTION:.0%}"
        logger.error(msg)
        raise ComputationError(msg)

    lowers = np.array([r[0] for r in kept])
    uppers = np.array([r[1] for r in kept])
    lo = empirical_quantile(lowers, alpha / 2.0)
    hi = empirical_quantile(uppers, 1.0 - alpha / 2.0)
    if lo > hi:
        lo = hi = (lo + hi) / 2.0
    return ConfidenceInterval(lo, hi, n_dropped)


def cv_residual_std(covariates, responses, fitter: Callable, folds: int = 5, seed: int = 0) -> float:
    """
    Square root of the fold-averaged held-out mean squared error.

    Args:
        covariates: (n, d) covariates
        responses: length-n responses
        fitter (Callable): (covariates, responses) -> predict(covariates)
        folds (int): Number of folds
        seed (int): Seed of the fold assignment

    Returns:
        float: Cross-validated residual standard deviation
    """
    X = as_matrix("covariates", covariates)
    y = as_vector("responses", responses, length=X.shape[0])
    errors = []
    everything = np.arange(X.shape[0])
    for heldout in fold_indices(X.shape[0], int(folds), seed):
        retained = np.setdiff1d(everything, heldout)
        predict = fitter(X[retained], y[retained])
        residuals = y[heldout] - np.asarray(predict(X[heldout]), dtype=np.float64).reshape(-1)
        errors.append(np.mean(residuals ** 2))
    return float(np.sqrt(np.mean(errors)))


def extrapolation_score(bounds: BoundTable, sigma: float) -> ScoreTable:
    """Bound width divided by sigma at every target."""
    if not np.isfinite(sigma) or sigma <= 0:
        fail(f"sigma must be a positive number, got {sigma}")
    return ScoreTable(bounds.targets, bounds.width / float(sigma), float(sigma))


def interval_width_score(lower_quantile_bounds: BoundTable, upper_quantile_bounds: BoundTable) -> np.ndarray:
    """Sum of the bound widths of the two quantile tables at every target."""
    _check_shared_targets(lower_quantile_bounds, upper_quantile_bounds)
    return lower_quantile_bounds.width + upper_quantile_bounds.width


def interval_coverage(intervals: IntervalTable, responses) -> float:
    """Fraction of responses inside their interval."""
    y = as_vector("responses", responses, length=intervals.m)
    if y.size == 0:
        fail("coverage needs at least one response")
    return float(np.mean((intervals.lo <= y) & (y <= intervals.hi)))


def extrapolation_splits(covariates, column: int, n_splits: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Leave-one-range-out splits along one covariate.

    Samples are sorted by the given column and cut into n_splits contiguous
    blocks; each block is held out once, so the test points lie outside the
    range covered by the training points in that coordinate whenever the
    block is at either end.

    Returns:
        List[Tuple[np.ndarray, np.ndarray]]: (train, test) index pairs
    """
    X = as_matrix("covariates", covariates)
    if not 0 <= int(column) < X.shape[1]:
        fail(f"column must lie in [0, {X.shape[1] - 1}], got {column}")
    if int(n_splits) < 2 or int(n_splits) > X.shape[0]:
        fail(f"n_splits must lie in [2, {X.shape[0]}], got {n_splits}")
    order = np.argsort(X[:, int(column)], kind="stable")
    splits = []
    for block in np.array_split(order, int(n_splits)):
        test = np.sort(block)
        splits.append((np.setdiff1d(order, test), test))
    return splits


def rolling_coverage(scores, covered, window: int) -> pd.DataFrame:
    """Coverage in a rolling window of observations sorted by score."""
    scores = as_vector("scores", scores)
    covered = np.asarray(covered, dtype=bool).reshape(-1)
    if covered.shape != scores.shape:
        fail("scores and coverage indicators must be aligned")
    if int(window) < 1 or int(window) > scores.size:
        fail(f"window must lie in [1, {scores.size}], got {window}")
    order = np.argsort(scores, kind="stable")
    frame = pd.DataFrame({"score": scores[order], "covered": covered[order].astype(float)})
    frame["coverage"] = frame["covered"].rolling(int(window)).mean()
    return frame.dropna(subset=["coverage"])[["score", "coverage"]].reset_index(drop=True)


def make_bounds_pipeline(q: int = 1, pilot_params: Optional[ForestParams] = None, penalty: float = 0.0,
                         forest_params: Optional[ForestParams] = None, seed: int = 0,
                         n_jobs: int = 1,
                         selected: Optional[Sequence[Tuple[ForestParams, float]]] = None) -> Callable:
    """
    Closure (covariates, responses, targets) -> BoundTable that fits a
    regression forest pilot and runs the bounds pipeline on it.

    ``selected`` fixes the per-direction forest and penalty, so every
    bootstrap replicate reuses one tuned choice.
    """
    pilot_params = pilot_params or ForestParams(seed=seed)

    def pipeline(covariates, responses, targets) -> BoundTable:
        responses = np.asarray(responses, dtype=np.float64)
        pilot_forest = fit_regression_forest(covariates, responses, pilot_params, n_jobs=n_jobs)
        pilot = pilot_forest.predict_mean(responses, covariates)
        model = Xtrapolation(q=q, penalty=penalty, forest_params=forest_params, seed=seed, n_jobs=n_jobs,
                             selected=selected)
        return model.fit(SampleSet(covariates, pilot)).predict_bounds(targets)

    return pipeline
