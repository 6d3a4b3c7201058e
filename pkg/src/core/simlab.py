"""
Simulation lab with piecewise-linear ground truth.

Models are continuous piecewise-linear functions of the first coordinate on
[-2, 2]^d whose support leaves out one of the four unit intervals per
coordinate. The slope on the left-out interval of the first coordinate is
copied from an observed interval, so every model satisfies the first
derivative extrapolation assumption and oracle bounds are available in
closed form.
"""
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy.spatial.distance import cdist

from src.core.bounds import BoundTable, DerivativeField, SampleSet, bounds_order_one
from src.core.forest import ForestParams, fit_regression_forest
from src.core.inference import cv_residual_std, extrapolation_score, midpoint_prediction
from src.core.tuning import TuningGrid, default_forest_grid
from src.core.xtrapolation import Xtrapolation
from src.utils.numeric import as_matrix, as_vector, fail, fold_indices, spawn_seeds

EDGES = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
N_INTERVALS = 4
SLOPE_RANGE = 10.0
DEPTH_GRID = (1, 2, 4, 8, 16, None)
METHODS = ("rf", "ols")


def interval_index(values) -> np.ndarray:
    """0-based interval of every value: [-2,-1), [-1,0), [0,1), [1,2]."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 2.0), 0, N_INTERVALS - 1).astype(int)


def continuous_intercepts(slopes) -> np.ndarray:
    """Intercepts making the piecewise-linear function continuous with f(-2) = 0."""
    slopes = as_vector("slopes", slopes, length=N_INTERVALS)
    intercepts = np.empty(N_INTERVALS)
    intercepts[0] = 2.0 * slopes[0]
    for k in range(1, N_INTERVALS):
        intercepts[k] = intercepts[k - 1] + (slopes[k - 1] - slopes[k]) * EDGES[k]
    return intercepts


def uniform_variance(slopes, intercepts) -> float:
    """Variance of s_k t + c_k for t uniform on [-2, 2], by piecewise integration."""
    first = second = 0.0
    for s, c, a, b in zip(slopes, intercepts, EDGES[:-1], EDGES[1:]):
        first += s * (b ** 2 - a ** 2) / 2.0 + c * (b - a)
        second += s ** 2 * (b ** 3 - a ** 3) / 3.0 + s * c * (b ** 2 - a ** 2) + c ** 2 * (b - a)
    width = EDGES[-1] - EDGES[0]
    return second / width - (first / width) ** 2


@dataclass(frozen=True)
class SimModel:
    """Piecewise-linear ground truth with its support layout."""

    d: int
    removed: Tuple[int, ...]
    slopes: np.ndarray
    intercepts: np.ndarray
    scale: float
    noise_sd: float = 0.1

    def __post_init__(self):
        removed = tuple(int(k) for k in self.removed)
        if int(self.d) < 1 or len(removed) != int(self.d):
            fail(f"need one removed interval per coordinate, got {len(removed)} for d = {self.d}")
        if any(not 0 <= k < N_INTERVALS for k in removed):
            fail(f"removed intervals must lie in [0, {N_INTERVALS - 1}], got {removed}")
        if not self.scale > 0 or self.noise_sd < 0:
            fail("scale must be positive and noise_sd non-negative")
        object.__setattr__(self, "removed", removed)
        object.__setattr__(self, "slopes", as_vector("slopes", self.slopes, length=N_INTERVALS))
        object.__setattr__(self, "intercepts", as_vector("intercepts", self.intercepts, length=N_INTERVALS))

    @property
    def left_out(self) -> int:
        """Removed interval of the first coordinate."""
        return self.removed[0]

    @property
    def observed_slopes(self) -> np.ndarray:
        return np.delete(self.slopes, self.left_out)

    def to_dict(self) -> dict:
        values = asdict(self)
        values["slopes"] = self.slopes.tolist()
        values["intercepts"] = self.intercepts.tolist()
        return values


def gen_sim_model(d: int, seed: int = 0, slopes: Optional[Sequence[float]] = None,
                  removed: Optional[Sequence[int]] = None, noise_sd: float = 0.1) -> SimModel:
    """
    Draw a random simulation model.

    Args:
        d (int): Dimension
        seed (int): Seed of the draw
        slopes (Sequence[float], optional): Fixed slopes instead of random ones
        removed (Sequence[int], optional): Fixed removed intervals, one per coordinate
        noise_sd (float): Standard deviation of the additive noise

    Returns:
        SimModel: Model with Var(f(U)) = 1 for U uniform on the cube
    """
    if int(d) < 1:
        fail(f"dimension must be positive, got {d}")
    rng = np.random.default_rng(seed)
    removed = rng.integers(0, N_INTERVALS, int(d)) if removed is None else np.asarray(removed, dtype=int)
    if slopes is None:
        left_out = int(removed[0])
        observed = [k for k in range(N_INTERVALS) if k != left_out]
        slopes = np.empty(N_INTERVALS)
        slopes[observed] = rng.uniform(-SLOPE_RANGE, SLOPE_RANGE, len(observed))
        # Left-out slope repeats an observed one
        slopes[left_out] = slopes[rng.choice(observed)]
    slopes = np.asarray(slopes, dtype=np.float64)
    intercepts = continuous_intercepts(slopes)
    variance = uniform_variance(slopes, intercepts)
    scale = 1.0 / np.sqrt(variance) if variance > 0 else 1.0
    return SimModel(int(d), tuple(removed), slopes, intercepts, float(scale), float(noise_sd))


def _points(model: SimModel, x) -> np.ndarray:
    X = as_matrix("x", x, n_cols=model.d, allow_empty=True)
    if np.any(np.abs(X) > EDGES[-1]):
        fail("points must lie in the cube [-2, 2]^d")
    return X


def eval_piecewise_f(model: SimModel, x):
    """
    Ground-truth function value.

    Args:
        model (SimModel): The model
        x: Point of length d, or an (m, d) matrix of points

    Returns:
        float or np.ndarray: f at the point(s)
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == model.d)
    X = _points(model, np.reshape(x, (1, -1)) if single else x)
    k = interval_index(X[:, 0])
    values = model.scale * (model.slopes[k] * X[:, 0] + model.intercepts[k])
    return float(values[0]) if single else values


def true_gradients(model: SimModel, x) -> np.ndarray:
    """(m, d) gradients: scaled slope in coordinate 1, zero elsewhere."""
    X = _points(model, x)
    gradients = np.zeros_like(X)
    gradients[:, 0] = model.scale * model.slopes[interval_index(X[:, 0])]
    return gradients


def in_support(model: SimModel, x) -> np.ndarray:
    """Whether every coordinate avoids its removed interval."""
    X = _points(model, x)
    return np.all(interval_index(X) != np.asarray(model.removed)[None, :], axis=1)


def is_identifiable(model: SimModel) -> bool:
    """Inner interval removed in coordinate 1 and it carries an extreme observed slope."""
    if model.left_out not in (1, 2):
        return False
    observed = model.observed_slopes
    slope = model.slopes[model.left_out]
    return bool(slope == observed.min() or slope == observed.max())


def sample_support(model: SimModel, m: int, seed=0) -> np.ndarray:
    """
    Uniform draws on the support.

    Each coordinate is drawn on the union of its three retained unit
    intervals by mapping a uniform variable on [0, 3) onto them.
    """
    if int(m) < 0:
        fail(f"sample size must be non-negative, got {m}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, N_INTERVALS - 1.0, (int(m), model.d))
    block = np.floor(u).astype(int)
    X = np.empty_like(u)
    for j, removed in enumerate(model.removed):
        retained = np.array([k for k in range(N_INTERVALS) if k != removed])
        X[:, j] = EDGES[retained[block[:, j]]] + (u[:, j] - block[:, j])
    return X


def sample_out_of_support(model: SimModel, m: int, seed=0, batch: int = 1024) -> np.ndarray:
    """Uniform draws on the cube outside the support, by rejection."""
    rng = np.random.default_rng(seed)
    kept: List[np.ndarray] = []
    count = 0
    while count < int(m):
        candidates = rng.uniform(EDGES[0], EDGES[-1], (batch, model.d))
        outside = candidates[~in_support(model, candidates)]
        kept.append(outside)
        count += outside.shape[0]
    if not kept:
        return np.empty((0, model.d))
    return np.vstack(kept)[: int(m)]


def sample_dataset(model: SimModel, n: int, seed=0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw n covariates uniformly on the support and noisy responses.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (n, d) covariates and length-n responses
    """
    if int(n) < 1:
        fail(f"sample size must be positive, got {n}")
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    covariates_seed, noise_seed = sequence.spawn(2)
    X = sample_support(model, n, covariates_seed)
    noise = np.random.default_rng(noise_seed).standard_normal(int(n))
    return X, eval_piecewise_f(model, X) + model.noise_sd * noise


def oracle_bounds(model: SimModel, anchors, targets) -> BoundTable:
    """Order-one bounds from exact function values and gradients at the anchors."""
    X = _points(model, anchors)
    samples = SampleSet(X, eval_piecewise_f(model, X))
    return bounds_order_one(samples, DerivativeField.order_one(true_gradients(model, X)), _points(model, targets))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_pair(estimated: BoundTable, oracle: BoundTable):
    if estimated.m != oracle.m or estimated.m == 0:
        fail(f"tables must share a non-empty target set, got {estimated.m} and {oracle.m} targets")


def rmse_vs_oracle(estimated: BoundTable, oracle: BoundTable) -> float:
    """RMSE of the lower bounds plus RMSE of the upper bounds."""
    _check_pair(estimated, oracle)
    lower = np.sqrt(np.mean((estimated.lower - oracle.lower) ** 2))
    upper = np.sqrt(np.mean((estimated.upper - oracle.upper) ** 2))
    return float(lower + upper)


def worst_case_rmse(predictions, oracle: BoundTable, noise_sd: float) -> float:
    """Mean over targets of the RMSE under the least favourable model between the oracle bounds."""
    predictions = as_vector("predictions", predictions, length=oracle.m)
    if oracle.m == 0:
        fail("worst-case RMSE needs at least one target")
    worst = np.maximum((oracle.upper - predictions) ** 2, (oracle.lower - predictions) ** 2)
    return float(np.mean(np.sqrt(worst + noise_sd ** 2)))


def euclidean_scores(covariates, targets) -> np.ndarray:
    """Distance from every target to its nearest sample."""
    X = as_matrix("covariates", covariates)
    targets = as_matrix("targets", targets, n_cols=X.shape[1], allow_empty=True)
    if targets.shape[0] == 0:
        return np.empty(0)
    return cdist(targets, X).min(axis=1)


def euclidean_score(covariates, target) -> float:
    """Distance from one target to its nearest sample."""
    target = as_vector("target", target)
    return float(euclidean_scores(covariates, target[None, :])[0])


def cumulative_rmse_curve(scores, predictions, truth, thresholds=None) -> pd.DataFrame:
    """
    Retained fraction and RMSE of the points scoring at most each threshold.

    Args:
        scores: length-m scores
        predictions: length-m predictions
        truth: length-m true values
        thresholds: Thresholds; every distinct score if None

    Returns:
        pd.DataFrame: columns threshold, fraction, rmse; thresholds selecting
        no point are omitted
    """
    scores = as_vector("scores", scores)
    predictions = as_vector("predictions", predictions, length=scores.size)
    truth = as_vector("truth", truth, length=scores.size)
    thresholds = np.unique(scores) if thresholds is None else as_vector("thresholds", thresholds)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    cumulative = np.cumsum((predictions[order] - truth[order]) ** 2)
    counts = np.searchsorted(sorted_scores, thresholds, side="right")
    keep = counts > 0
    counts = counts[keep]
    return pd.DataFrame({
        "threshold": thresholds[keep],
        "fraction": counts / scores.size,
        "rmse": np.sqrt(cumulative[counts - 1] / counts),
    })


def retained_fraction(curve: pd.DataFrame, rmse_level: float) -> float:
    """Largest retained fraction whose cumulative RMSE is at most rmse_level."""
    below = curve.loc[curve["rmse"] <= rmse_level, "fraction"]
    return float(below.max()) if len(below) else 0.0


def rmse_by_score(scores, predictions, truth, threshold: float = 1.0) -> Tuple[float, float]:
    """
    RMSE of the predictions at targets with score <= threshold and with score > threshold.

    Returns:
        Tuple[float, float]: the two RMSEs, NaN for an empty group
    """
    scores = as_vector("scores", scores)
    squared = (as_vector("predictions", predictions, length=scores.size)
               - as_vector("truth", truth, length=scores.size)) ** 2
    low = scores <= threshold
    return tuple(float(np.sqrt(squared[part].mean())) if part.any() else float("nan") for part in (low, ~low))


# ---------------------------------------------------------------------------
# Simulation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationSettings:
    """Design of a simulation study."""

    sample_sizes: Tuple[int, ...] = (100, 400, 1600)
    dims: Tuple[int, ...] = (2,)
    methods: Tuple[str, ...] = ("rf",)
    reps: int = 20
    seed: int = 0
    noise_sd: float = 0.1
    n_eval: int = 200
    pilot_trees: int = 50
    forest_trees: int = 50
    penalty: float = 0.0
    tune: bool = True
    anchor_fraction: float = 0.5
    rmse_level: Optional[float] = None
    folds: int = 5
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("sample_sizes", "dims", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            fail(f"unknown pilot methods {sorted(unknown)}, expected a subset of {METHODS}")
        if int(self.reps) < 1 or int(self.n_eval) < 1:
            fail("reps and n_eval must be positive")
        if not 0 < self.anchor_fraction <= 1:
            fail(f"anchor_fraction must lie in (0, 1], got {self.anchor_fraction}")
        # Retained fractions are read off at the noise level unless told otherwise
        if self.rmse_level is None:
            object.__setattr__(self, "rmse_level", float(self.noise_sd))
        if not self.rmse_level > 0:
            fail(f"rmse_level must be positive, got {self.rmse_level}")


def _ols_fitter(covariates, responses) -> Callable:
    design = np.column_stack([np.ones(len(covariates)), covariates])
    coef, _, _, _ = np.linalg.lstsq(design, responses, rcond=None)
    return lambda points: np.column_stack([np.ones(len(points)), points]) @ coef


def _rf_fitter(params: ForestParams) -> Callable:
    def fit(covariates, responses):
        responses = np.asarray(responses, dtype=np.float64)
        forest = fit_regression_forest(covariates, responses, params)
        return lambda points: forest.predict_mean(responses, points)
    return fit


def depth_cv_residual_std(covariates, responses, params: ForestParams, depths: Sequence[Optional[int]],
                          folds: int = 5, seed: int = 0) -> np.ndarray:
    """
    Cross-validated residual standard deviation of a forest at every depth.

    Each fold grows one unlimited forest and scores every depth by cutting
    its trees, so the result follows cv_residual_std with the same folds.

    Returns:
        np.ndarray: one value per entry of depths
    """
    X = as_matrix("covariates", covariates)
    y = as_vector("responses", responses, length=X.shape[0])
    params = params.replace(max_depth=None)
    errors = np.empty((len(depths), int(folds)))
    everything = np.arange(X.shape[0])
    for f, heldout in enumerate(fold_indices(X.shape[0], int(folds), seed)):
        retained = np.setdiff1d(everything, heldout)
        forest = fit_regression_forest(X[retained], y[retained], params)
        for k, depth in enumerate(depths):
            residuals = y[heldout] - forest.predict_mean(y[retained], X[heldout], max_depth=depth)
            errors[k, f] = np.mean(residuals ** 2)
    return np.sqrt(errors.mean(axis=1))


def select_pilot(method: str, covariates, responses, settings: SimulationSettings, seed: int):
    """
    Pilot fitter for a method, with the forest depth chosen by cross-validation.

    Returns:
        Tuple[Callable, float]: fitter and its cross-validated residual standard deviation
    """
    if method == "ols":
        return _ols_fitter, cv_residual_std(covariates, responses, _ols_fitter, settings.folds, seed)
    params = ForestParams(n_trees=settings.pilot_trees, seed=seed)
    sigmas = depth_cv_residual_std(covariates, responses, params, DEPTH_GRID, settings.folds, seed)
    # First minimum keeps the shallowest depth on ties
    best = int(np.argmin(sigmas))
    logger.debug(f"pilot depth {DEPTH_GRID[best]} selected, cross-validated residual sd {sigmas[best]:.4g}")
    return _rf_fitter(params.replace(max_depth=DEPTH_GRID[best])), float(sigmas[best])


def run_replicate(n: int, d: int, method: str, rep: int, settings: SimulationSettings):
    """
    One simulated dataset, its pilot, estimated and oracle bounds and all metrics.

    Returns:
        Tuple[dict, pd.DataFrame]: metrics row and cumulative RMSE curves
    """
    base = int(spawn_seeds(settings.seed, settings.reps)[rep].generate_state(1)[0])
    model = gen_sim_model(d, np.random.SeedSequence([base, d, 0]), noise_sd=settings.noise_sd)
    X, y = sample_dataset(model, n, np.random.SeedSequence([base, d, n, 1]))
    eval_seeds = np.random.SeedSequence([base, d, n, 2]).spawn(2)
    inside = sample_support(model, settings.n_eval, eval_seeds[0])
    outside = sample_out_of_support(model, settings.n_eval, eval_seeds[1])
    targets = np.vstack([inside, outside])
    n_in = inside.shape[0]

    fitter, sigma = select_pilot(method, X, y, settings, base)
    predict = fitter(X, y)
    samples = SampleSet(X, predict(X))
    forest_params = ForestParams(n_trees=settings.forest_trees, seed=base)
    grid = TuningGrid(forest_params=default_forest_grid(forest_params), folds=settings.folds) if settings.tune else None
    n_anchors = max(1, int(settings.anchor_fraction * n)) if settings.anchor_fraction < 1 else None
    pipeline = Xtrapolation(q=1, penalty=settings.penalty, forest_params=forest_params, grid=grid,
                            n_anchors=n_anchors, anchor_metric="euclidean", seed=base)
    estimated = pipeline.fit(samples).predict_bounds(targets)
    oracle = oracle_bounds(model, X, targets)

    truth = eval_piecewise_f(model, targets)
    xtra = midpoint_prediction(estimated)
    reg = np.asarray(predict(targets), dtype=np.float64)
    split = {"in": slice(0, n_in), "out": slice(n_in, None)}
    row = {"rep": rep, "seed": base, "n": n, "d": d, "method": method,
           "identifiable": is_identifiable(model), "sigma_cv": sigma}
    for name, part in split.items():
        est_part = BoundTable(estimated.targets[part], estimated.lower[part], estimated.upper[part])
        ora_part = BoundTable(oracle.targets[part], oracle.lower[part], oracle.upper[part])
        row[f"rmse_{name}"] = rmse_vs_oracle(est_part, ora_part)
        row[f"wc_rmse_reg_{name}"] = worst_case_rmse(reg[part], ora_part, model.noise_sd)
        row[f"wc_rmse_xtra_{name}"] = worst_case_rmse(xtra[part], ora_part, model.noise_sd)
        row[f"oracle_width_{name}"] = float(np.mean(oracle.width[part]))

    scores = {
        "S": extrapolation_score(estimated, sigma).score if sigma > 0 else estimated.width.copy(),
        "E": euclidean_scores(X, targets),
    }
    row["median_score_in"] = float(np.median(scores["S"][:n_in]))
    row["median_score_out"] = float(np.median(scores["S"][n_in:]))
    row["rmse_S_le_1"], row["rmse_S_gt_1"] = rmse_by_score(scores["S"], xtra, truth)
    curves = []
    for score_type, values in scores.items():
        curve = cumulative_rmse_curve(values, xtra, truth)
        row[f"retained_{score_type}"] = retained_fraction(curve, settings.rmse_level)
        curve.insert(0, "score_type", score_type)
        curves.append(curve)
    curves = pd.concat(curves, ignore_index=True)
    for key in ("method", "d", "n", "rep"):
        curves.insert(0, key, row[key])
    logger.info(f"replicate {rep}: n={n}, d={d}, method={method}, "
                f"rmse_in={row['rmse_in']:.4f}, rmse_out={row['rmse_out']:.4f}")
    return row, curves


def run_simulation(settings: SimulationSettings = SimulationSettings()) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Run every replicate of a simulation study.

    Args:
        settings (SimulationSettings): Study design

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: one metrics row per (n, d, method, rep)
        and the stacked cumulative RMSE curves
    """
    jobs = [(n, d, method, rep) for d in settings.dims for n in settings.sample_sizes
            for method in settings.methods for rep in range(settings.reps)]
    logger.info(f"running {len(jobs)} simulation replicates")
    results = Parallel(n_jobs=settings.n_jobs)(
        delayed(run_replicate)(n, d, method, rep, settings) for n, d, method, rep in jobs
    )
    metrics = pd.DataFrame([row for row, _ in results])
    curves = pd.concat([curve for _, curve in results], ignore_index=True) if results else pd.DataFrame()
    return metrics, curves
