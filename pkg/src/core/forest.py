"""
Random forests with mean or polynomial splitting rules and their leaf weights.

Two forests share one tree grower:

* the regression forest scores splits by the residual sum of squares of a
  mean fit per child (variance reduction) and produces pilot predictions;
* the polynomial forest scores splits by the residual sum of squares of a
  degree-(q+1) polynomial fit in the projection v^T x on each child, which
  groups samples that one low-order polynomial describes well.

Both expose the forest weights w_i(x) = (1/M) sum_k 1(i in L_k(x)) / |L_k(x)|
used for local polynomial fitting and quantile prediction.
"""
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import sparse

from src.core.bounds import SampleSet
from src.utils.numeric import (as_matrix, as_vector, check_level, fail, solve_normal_equations,
                               spawn_seeds, weighted_quantile)

MAX_THRESHOLDS = 256
ROUNDOFF_RTOL = 1e-10
LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters; the seed fixes every random choice."""

    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 5
    impurity_tol: float = 0.0
    mtry: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def validate(self, d: Optional[int] = None) -> "ForestParams":
        if int(self.n_trees) < 1:
            fail(f"n_trees must be positive, got {self.n_trees}")
        if self.max_depth is not None and int(self.max_depth) < 1:
            fail(f"max_depth must be positive or None, got {self.max_depth}")
        if int(self.min_samples_leaf) < 1:
            fail(f"min_samples_leaf must be positive, got {self.min_samples_leaf}")
        if not float(self.impurity_tol) >= 0:
            fail(f"impurity_tol must be non-negative, got {self.impurity_tol}")
        if self.mtry is not None:
            if int(self.mtry) < 1 or (d is not None and int(self.mtry) > d):
                fail(f"mtry must lie in [1, {d}], got {self.mtry}")
        return self

    def replace(self, **changes) -> "ForestParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        params = asdict(self)
        # JSON has no infinity literal
        if np.isinf(params["impurity_tol"]):
            params["impurity_tol"] = "inf"
        return params

    @classmethod
    def from_dict(cls, values: dict) -> "ForestParams":
        values = dict(values)
        if "impurity_tol" in values:
            values["impurity_tol"] = float(values["impurity_tol"])
        return cls(**values)


@dataclass
class Tree:
    """One fitted binary tree; leaves keep the unique in-bag sample indices."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_samples: Dict[int, np.ndarray]
    inbag: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_samples)

    def apply(self, points: np.ndarray, max_depth: Optional[int] = None) -> np.ndarray:
        """Node id reached by every row of points, stopping at max_depth if given."""
        node = np.zeros(points.shape[0], dtype=int)
        active = np.flatnonzero(self.feature[node] != LEAF)
        depth = 0
        # Active points move in lockstep, so all of them sit at the same depth
        while active.size and (max_depth is None or depth < max_depth):
            depth += 1
            current = node[active]
            go_left = points[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def node_means(self, responses: np.ndarray) -> np.ndarray:
        """Mean response over the unique in-bag samples below every node."""
        sums, counts = np.zeros(self.n_nodes), np.zeros(self.n_nodes)
        for node, members in self.leaf_samples.items():
            sums[node], counts[node] = responses[members].sum(), members.size
        # Children are numbered after their parent
        for node in range(self.n_nodes - 1, -1, -1):
            if self.feature[node] != LEAF:
                sums[node] = sums[self.left[node]] + sums[self.right[node]]
                counts[node] = counts[self.left[node]] + counts[self.right[node]]
        return sums / counts

    def membership(self, n_samples: int) -> sparse.csc_matrix:
        """(n_samples, n_nodes) matrix with 1/|L| for every sample i in leaf L."""
        rows, cols, vals = [], [], []
        for node, members in self.leaf_samples.items():
            rows.append(members)
            cols.append(np.full(members.size, node))
            vals.append(np.full(members.size, 1.0 / members.size))
        return sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_samples, self.n_nodes),
        )

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaves": {str(node): members.tolist() for node, members in self.leaf_samples.items()},
            "inbag": self.inbag.tolist(),
        }

    @classmethod
    def from_dict(cls, values: dict) -> "Tree":
        return cls(
            feature=np.asarray(values["feature"], dtype=int),
            threshold=np.asarray(values["threshold"], dtype=np.float64),
            left=np.asarray(values["left"], dtype=int),
            right=np.asarray(values["right"], dtype=int),
            leaf_samples={int(node): np.asarray(members, dtype=int) for node, members in values["leaves"].items()},
            inbag=np.asarray(values["inbag"], dtype=int),
        )


@dataclass
class Forest:
    """A fitted forest together with what it was fitted on."""

    params: ForestParams
    trees: List[Tree]
    n_samples: int
    n_features: int
    degree: int = 0
    direction: Optional[np.ndarray] = None

    def apply(self, points) -> np.ndarray:
        """(m, M) leaf ids of every point in every tree."""
        points = as_matrix("points", points, n_cols=self.n_features, allow_empty=True)
        if points.shape[0] == 0:
            return np.empty((0, len(self.trees)), dtype=int)
        return np.column_stack([tree.apply(points) for tree in self.trees])

    def weights(self, points) -> np.ndarray:
        """
        Forest weights of every training sample at every point.

        Args:
            points: (m, d) evaluation points

        Returns:
            np.ndarray: (n_samples, m) matrix, entry (i, l) = w_i(points[l]);
            every column sums to one
        """
        points = as_matrix("points", points, n_cols=self.n_features, allow_empty=True)
        total = np.zeros((self.n_samples, points.shape[0]))
        for tree in self.trees:
            leaves = tree.apply(points)
            total += tree.membership(self.n_samples)[:, leaves].toarray()
        return total / len(self.trees)

    def predict_mean(self, responses, points, max_depth: Optional[int] = None) -> np.ndarray:
        """
        Weight-averaged responses at the points.

        With max_depth, every tree is cut at that depth first. For forests
        grown with mtry = d this matches growing with max_depth, up to
        exact ties between split candidates.
        """
        responses = as_vector("responses", responses, length=self.n_samples)
        if max_depth is None:
            return responses @ self.weights(points)
        points = as_matrix("points", points, n_cols=self.n_features, allow_empty=True)
        total = np.zeros(points.shape[0])
        for tree in self.trees:
            total += tree.node_means(responses)[tree.apply(points, max_depth)]
        return total / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "n_samples": self.n_samples,
            "n_features": self.n_features,
            "degree": self.degree,
            "direction": None if self.direction is None else self.direction.tolist(),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, values: dict) -> "Forest":
        direction = values.get("direction")
        return cls(
            params=ForestParams.from_dict(values["params"]),
            trees=[Tree.from_dict(tree) for tree in values["trees"]],
            n_samples=int(values["n_samples"]),
            n_features=int(values["n_features"]),
            degree=int(values.get("degree", 0)),
            direction=None if direction is None else np.asarray(direction, dtype=np.float64),
        )


@dataclass(frozen=True)
class WeightMatrix:
    """n x n forest weights, entry (i, l) = w_i(X_l)."""

    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            fail(f"weight matrix must be square, got shape {entries.shape}")
        if np.any(entries < 0) or not np.all(np.isfinite(entries)):
            fail("weight matrix entries must be finite and non-negative")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def restrict_columns(self, keep) -> "WeightMatrix":
        """
        Copy with every column outside keep set to zero.

        Rows left without support are spread uniformly over keep.
        """
        keep = np.unique(np.asarray(keep, dtype=int).reshape(-1))
        if keep.size == 0:
            fail("cannot restrict weights to an empty column set")
        entries = np.zeros_like(self.entries)
        entries[:, keep] = self.entries[:, keep]
        empty = np.flatnonzero(entries.sum(axis=1) <= 0)
        if empty.size:
            logger.warning(f"{empty.size} rows have no retained support, using uniform weights for them")
            entries[np.ix_(empty, keep)] = 1.0 / keep.size
        return WeightMatrix(entries)


# ---------------------------------------------------------------------------
# Split scoring
# ---------------------------------------------------------------------------

def _mean_rss(y: np.ndarray) -> float:
    return float(np.sum((y - y.mean()) ** 2)) if y.size else 0.0


def _child_rss(t: np.ndarray, y: np.ndarray, degree: int) -> float:
    """Least-squares RSS of a degree-`degree` polynomial in t, with mean fallback."""
    if degree == 0 or y.size < degree + 1 or np.ptp(t) == 0:
        return _mean_rss(y)
    center = (t.max() + t.min()) / 2.0
    half = np.ptp(t) / 2.0
    design = ((t - center) / half)[:, None] ** np.arange(degree + 1)[None, :]
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.sum((y - design @ coef) ** 2))


def split_impurity(samples: SampleSet, left, right, v, q: int) -> float:
    """
    Impurity of a candidate split under the polynomial splitting rule.

    Args:
        samples (SampleSet): Covariates and pilot values
        left: Indices of the left child
        right: Indices of the right child
        v: Projection direction of length d
        q (int): Derivative order; children are fitted with degree q + 1

    Returns:
        float: Sum of both children's residual sums of squares. A child with
        fewer than q + 2 points or a constant projection is scored by a mean
        fit. The cut-off is q + 2, the number of coefficients of a degree q + 1
        fit, so a three-point child is still fitted by a quadratic when q = 1.
    """
    left = np.asarray(left, dtype=int)
    right = np.asarray(right, dtype=int)
    if left.size == 0 or right.size == 0:
        fail("both children of a split must be non-empty")
    v = _check_direction(v, samples.d)
    t = samples.covariates @ v
    degree = int(q) + 1
    return _child_rss(t[left], samples.pilot[left], degree) + _child_rss(t[right], samples.pilot[right], degree)


def _prefix_rss(t: np.ndarray, y: np.ndarray, degree: int, sizes: np.ndarray) -> np.ndarray:
    """RSS of the fits on the first `size` rows, for every requested size."""
    yc = y - y.mean()
    rows = sizes - 1
    sum_y = np.cumsum(yc)[rows]
    sum_yy = np.cumsum(yc ** 2)[rows]
    mean_rss = sum_yy - sum_y ** 2 / sizes
    spread = np.ptp(t)
    if degree == 0 or spread == 0:
        return np.clip(mean_rss, 0.0, None)

    u = (t - (t.max() + t.min()) / 2.0) / (spread / 2.0)
    powers = u[:, None] ** np.arange(degree + 1)[None, :]
    gram = np.cumsum(powers[:, :, None] * powers[:, None, :], axis=0)[rows]
    moment = np.cumsum(powers * yc[:, None], axis=0)[rows]
    t_min = np.minimum.accumulate(t)[rows]
    t_max = np.maximum.accumulate(t)[rows]
    use_poly = (sizes >= degree + 1) & (t_max > t_min)

    rss = mean_rss.copy()
    if np.any(use_poly):
        coef = solve_normal_equations(gram[use_poly], moment[use_poly])
        poly = sum_yy[use_poly] - np.sum(moment[use_poly] * coef, axis=1)
        # A polynomial fit contains the mean fit
        rss[use_poly] = np.minimum(poly, mean_rss[use_poly])
    return np.clip(rss, 0.0, None)


def _best_threshold(x: np.ndarray, t: Optional[np.ndarray], y: np.ndarray, degree: int,
                    min_leaf: int) -> Tuple[float, Optional[float]]:
    """Lowest impurity over the candidate thresholds of one coordinate."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    m = xs.size
    sizes = np.arange(min_leaf, m - min_leaf + 1)
    sizes = sizes[xs[sizes - 1] < xs[np.minimum(sizes, m - 1)]]
    if sizes.size == 0:
        return np.inf, None
    if sizes.size > MAX_THRESHOLDS:
        keep = np.unique(np.round(np.linspace(0, sizes.size - 1, MAX_THRESHOLDS)).astype(int))
        sizes = sizes[keep]

    ys = y[order]
    ts = t[order] if t is not None else ys
    left = _prefix_rss(ts, ys, degree, sizes)
    right = _prefix_rss(ts[::-1], ys[::-1], degree, m - sizes)
    impurity = left + right
    best = int(np.argmin(impurity))
    size = sizes[best]
    return float(impurity[best]), float((xs[size - 1] + xs[size]) / 2.0)


def _node_rss(t: Optional[np.ndarray], y: np.ndarray, degree: int) -> float:
    if t is None:
        return _mean_rss(y)
    return float(_prefix_rss(t, y, degree, np.array([y.size]))[0])


# ---------------------------------------------------------------------------
# Tree growing
# ---------------------------------------------------------------------------

def _grow_tree(X: np.ndarray, y: np.ndarray, t: Optional[np.ndarray], degree: int,
               params: ForestParams, seed: np.random.SeedSequence) -> Tree:
    """Grow one tree greedily on its in-bag sample."""
    rng = np.random.default_rng(seed)
    n, d = X.shape
    inbag = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
    mtry = d if params.mtry is None else int(params.mtry)
    min_leaf = int(params.min_samples_leaf)

    feature, threshold, left, right = [LEAF], [0.0], [LEAF], [LEAF]
    leaf_samples: Dict[int, np.ndarray] = {}
    stack = [(0, inbag, 0)]
    while stack:
        node, idx, depth = stack.pop()
        split = None
        depth_ok = params.max_depth is None or depth < params.max_depth
        if depth_ok and idx.size >= 2 * min_leaf:
            split = _find_split(X[idx], y[idx], None if t is None else t[idx], degree, min_leaf,
                                float(params.impurity_tol), rng.choice(d, size=mtry, replace=False))
        if split is None:
            leaf_samples[node] = np.unique(idx)
            continue

        j, thr = split
        goes_left = X[idx, j] <= thr
        left_id, right_id = len(feature), len(feature) + 1
        feature.extend([LEAF, LEAF])
        threshold.extend([0.0, 0.0])
        left.extend([LEAF, LEAF])
        right.extend([LEAF, LEAF])
        feature[node], threshold[node], left[node], right[node] = j, thr, left_id, right_id
        stack.append((right_id, idx[~goes_left], depth + 1))
        stack.append((left_id, idx[goes_left], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        leaf_samples=leaf_samples,
        inbag=np.unique(inbag),
    )


def _find_split(X: np.ndarray, y: np.ndarray, t: Optional[np.ndarray], degree: int, min_leaf: int,
                impurity_tol: float, features: np.ndarray) -> Optional[Tuple[int, float]]:
    parent = _node_rss(t, y, degree)
    # Decreases within round-off of the node's total sum of squares are not real
    impurity_tol = impurity_tol + ROUNDOFF_RTOL * _mean_rss(y)
    # Child impurities are non-negative, so no split can beat this
    if parent <= impurity_tol:
        return None
    best_impurity, best = np.inf, None
    for j in features:
        impurity, thr = _best_threshold(X[:, j], t, y, degree, min_leaf)
        if thr is not None and impurity < best_impurity:
            best_impurity, best = impurity, (int(j), thr)
    if best is None or parent - best_impurity <= impurity_tol:
        return None
    return best


def _check_direction(v, d: int) -> np.ndarray:
    v = as_vector("direction", v, length=d)
    if np.linalg.norm(v) == 0:
        fail("direction must be non-zero")
    return v


def _fit_forest(X: np.ndarray, y: np.ndarray, t: Optional[np.ndarray], degree: int,
                params: ForestParams, n_jobs: int) -> List[Tree]:
    seeds = spawn_seeds(params.seed, params.n_trees)
    return Parallel(n_jobs=n_jobs)(delayed(_grow_tree)(X, y, t, degree, params, seed) for seed in seeds)


def fit_poly_forest(samples: SampleSet, v, q: int, params: Optional[ForestParams] = None,
                    n_jobs: int = 1) -> Forest:
    """
    Fit a forest with the polynomial splitting rule in direction v.

    Args:
        samples (SampleSet): Covariates and pilot values
        v: Projection direction of length d
        q (int): Derivative order; split fits use degree q + 1
        params (ForestParams, optional): Hyperparameters, defaults if None
        n_jobs (int): Parallel workers over trees

    Returns:
        Forest: The fitted forest
    """
    params = (params or ForestParams()).validate(samples.d)
    if int(q) < 1:
        fail(f"order must be at least 1, got {q}")
    v = _check_direction(v, samples.d)
    t = samples.covariates @ v
    trees = _fit_forest(samples.covariates, samples.pilot, t, int(q) + 1, params, n_jobs)
    logger.debug(f"fitted polynomial forest: {len(trees)} trees, "
                 f"{np.mean([tree.n_leaves for tree in trees]):.1f} leaves on average")
    return Forest(params, trees, samples.n, samples.d, degree=int(q) + 1, direction=v)


def fit_regression_forest(covariates, responses, params: Optional[ForestParams] = None,
                          n_jobs: int = 1) -> Forest:
    """
    Fit a variance-reduction regression forest.

    Args:
        covariates: (n, d) covariates
        responses: length-n responses
        params (ForestParams, optional): Hyperparameters, defaults if None
        n_jobs (int): Parallel workers over trees

    Returns:
        Forest: The fitted forest
    """
    X = as_matrix("covariates", covariates)
    y = as_vector("responses", responses, length=X.shape[0])
    params = (params or ForestParams()).validate(X.shape[1])
    trees = _fit_forest(X, y, None, 0, params, n_jobs)
    logger.debug(f"fitted regression forest: {len(trees)} trees on {X.shape[0]} samples")
    return Forest(params, trees, X.shape[0], X.shape[1], degree=0)


def extract_weights(forest: Forest, samples: SampleSet) -> WeightMatrix:
    """
    Weight matrix of a forest at its own training covariates.

    Args:
        forest (Forest): Forest fitted on samples
        samples (SampleSet): The training samples

    Returns:
        WeightMatrix: entry (i, l) = w_i(X_l)
    """
    if forest.n_samples != samples.n or forest.n_features != samples.d:
        fail(f"forest was fitted on ({forest.n_samples}, {forest.n_features}) data, "
             f"samples are ({samples.n}, {samples.d})")
    return WeightMatrix(forest.weights(samples.covariates))


def predict_quantile(forest: Forest, responses, point, alpha: float) -> float:
    """
    Quantile regression forest prediction at one point.

    Args:
        forest (Forest): Forest fitted on the covariates paired with responses
        responses: length-n training responses
        point: Evaluation point of length d
        alpha (float): Quantile level in (0, 1)

    Returns:
        float: Smallest response whose cumulative forest weight reaches alpha
    """
    alpha = check_level("alpha", alpha)
    responses = as_vector("responses", responses, length=forest.n_samples)
    point = as_vector("point", point, length=forest.n_features)
    weights = forest.weights(point[None, :])[:, 0]
    return weighted_quantile(responses, weights, alpha)


def predict_quantiles(forest: Forest, responses, points, alpha: float) -> np.ndarray:
    """predict_quantile at every row of points."""
    alpha = check_level("alpha", alpha)
    responses = as_vector("responses", responses, length=forest.n_samples)
    weights = forest.weights(points)
    return np.array([weighted_quantile(responses, weights[:, ell], alpha) for ell in range(weights.shape[1])])


def oob_predict(forest: Forest, covariates, responses) -> np.ndarray:
    """
    Out-of-bag mean predictions at the training covariates.

    Returns:
        np.ndarray: length-n predictions, NaN where a sample was in-bag in every tree
    """
    X = as_matrix("covariates", covariates, n_cols=forest.n_features)
    y = as_vector("responses", responses, length=forest.n_samples)
    total = np.zeros(forest.n_samples)
    counts = np.zeros(forest.n_samples)
    for tree in forest.trees:
        out = np.setdiff1d(np.arange(forest.n_samples), tree.inbag)
        if out.size == 0:
            continue
        weights = tree.membership(forest.n_samples)[:, tree.apply(X[out])].toarray()
        total[out] += y @ weights
        counts[out] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def forest_fitter(params: Optional[ForestParams] = None, n_jobs: int = 1) -> Callable:
    """Fitter callable (X, y) -> predict(X_new) backed by a regression forest."""
    def fit(covariates, responses):
        responses = np.asarray(responses, dtype=np.float64)
        forest = fit_regression_forest(covariates, responses, params, n_jobs=n_jobs)
        return lambda points: forest.predict_mean(responses, points)
    return fit
