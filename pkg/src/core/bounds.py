"""
Extrapolation bound assembly from pilot predictions and derivative estimates.

Bounds are Taylor envelopes anchored at observed samples: every anchor
contributes a lower and an upper expansion whose highest-order term uses the
smallest and largest derivative observed anywhere in the sample. The final
bounds keep the tightest envelope over all anchors.
"""
from dataclasses import dataclass, field
from math import factorial
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from src.utils.numeric import as_matrix, as_vector, fail

ORDER_ONE = "order_one"
ONE_DIM = "one_dim"

# Relative spread below which scaled anchor distances count as identical
DEGENERATE_DISTANCE_TOL = 1e-12


@dataclass(frozen=True)
class SampleSet:
    """Observed covariates paired with pilot predictions at those points."""

    covariates: np.ndarray
    pilot: np.ndarray

    def __post_init__(self):
        covariates = as_matrix("covariates", self.covariates)
        pilot = as_vector("pilot", self.pilot, length=covariates.shape[0])
        covariates.setflags(write=False)
        pilot.setflags(write=False)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "pilot", pilot)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def with_pilot(self, pilot) -> "SampleSet":
        return SampleSet(self.covariates, pilot)


@dataclass(frozen=True)
class DerivativeField:
    """
    Derivative estimates at every sample.

    In order-one mode ``values[i, j]`` is the partial derivative in
    coordinate ``j`` at sample ``i``; in one-dimensional mode
    ``values[i, k - 1]`` is the derivative of order ``k``.
    """

    order: int
    values: np.ndarray
    mode: str = ORDER_ONE

    def __post_init__(self):
        if self.mode not in (ORDER_ONE, ONE_DIM):
            fail(f"unknown derivative mode '{self.mode}'")
        if int(self.order) < 1:
            fail(f"derivative order must be at least 1, got {self.order}")
        values = as_matrix("derivative values", self.values)
        if self.mode == ORDER_ONE and int(self.order) != 1:
            fail("order-one derivative fields carry first derivatives only")
        if self.mode == ONE_DIM and values.shape[1] != int(self.order):
            fail(f"one-dimensional field of order {self.order} needs {self.order} columns, got {values.shape[1]}")
        values.setflags(write=False)
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "values", values)

    @classmethod
    def order_one(cls, gradients) -> "DerivativeField":
        return cls(order=1, values=gradients, mode=ORDER_ONE)

    @classmethod
    def one_dim(cls, derivatives) -> "DerivativeField":
        derivatives = np.asarray(derivatives, dtype=np.float64)
        if derivatives.ndim == 1:
            derivatives = derivatives.reshape(-1, 1)
        return cls(order=derivatives.shape[1], values=derivatives, mode=ONE_DIM)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BoundTable:
    """Lower/upper extrapolation bounds at a set of target points."""

    targets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets.reshape(-1, 1)
        m = targets.shape[0]
        lower = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        upper = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        clamped = np.zeros(m, dtype=bool) if self.clamped is None else np.asarray(self.clamped, dtype=bool).reshape(-1)
        if not (lower.shape[0] == upper.shape[0] == clamped.shape[0] == m):
            fail("bound columns must have one entry per target")
        if np.any(lower > upper):
            fail("lower bounds must not exceed upper bounds")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "clamped", clamped)

    @property
    def m(self) -> int:
        return self.targets.shape[0]

    @property
    def mid(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_frame(self) -> pd.DataFrame:
        """Tabular view with columns x1..xd, lower, upper, mid, width, clamped."""
        frame = pd.DataFrame(self.targets, columns=[f"x{j + 1}" for j in range(self.targets.shape[1])])
        frame["lower"] = self.lower
        frame["upper"] = self.upper
        frame["mid"] = self.mid
        frame["width"] = self.width
        frame["clamped"] = self.clamped.astype(int)
        return frame

    @classmethod
    def concatenate(cls, tables: Sequence["BoundTable"], d: int) -> "BoundTable":
        if not tables:
            return cls(np.empty((0, d)), np.empty(0), np.empty(0))
        return cls(
            np.vstack([t.targets for t in tables]),
            np.concatenate([t.lower for t in tables]),
            np.concatenate([t.upper for t in tables]),
            np.concatenate([t.clamped for t in tables]),
        )


def clamp_bounds(raw_lower: float, raw_upper: float) -> Tuple[float, float, bool]:
    """
    Enforce lower <= upper at one target.

    Args:
        raw_lower (float): Max over anchors of the lower expansions
        raw_upper (float): Min over anchors of the upper expansions

    Returns:
        Tuple[float, float, bool]: (lower, upper, clamped); crossing bounds
        are both replaced by their midpoint
    """
    if not (np.isfinite(raw_lower) and np.isfinite(raw_upper)):
        fail(f"cannot clamp non-finite bounds ({raw_lower}, {raw_upper})")
    if raw_lower <= raw_upper:
        return float(raw_lower), float(raw_upper), False
    mid = (raw_lower + raw_upper) / 2.0
    return mid, mid, True


def _clamp_arrays(raw_lower: np.ndarray, raw_upper: np.ndarray):
    """Vectorised clamp_bounds."""
    clamped = raw_lower > raw_upper
    mid = (raw_lower + raw_upper) / 2.0
    lower = np.where(clamped, mid, raw_lower)
    upper = np.where(clamped, mid, raw_upper)
    return lower, upper, clamped


def _check_anchors(anchor_subset, n: int) -> np.ndarray:
    if anchor_subset is None:
        return np.arange(n)
    anchors = np.unique(np.asarray(anchor_subset, dtype=int).reshape(-1))
    if anchors.size == 0:
        fail("anchor subset is empty")
    if anchors[0] < 0 or anchors[-1] >= n:
        fail(f"anchor indices must lie in [0, {n - 1}]")
    return anchors


def _check_targets(targets, d: int) -> np.ndarray:
    return as_matrix("targets", targets, n_cols=d, allow_empty=True)


def _order_one_chunk(covariates, pilot, gradients, anchors, targets):
    """Raw lower/upper envelopes for a block of targets."""
    anchor_x = covariates[anchors]
    anchor_pilot = pilot[anchors]
    lower = np.empty(targets.shape[0])
    upper = np.empty(targets.shape[0])
    if covariates.shape[1] == 1:
        # Support function of a 1-D gradient set is attained at its extremes
        g_min, g_max = gradients[:, 0].min(), gradients[:, 0].max()
        delta = targets[:, 0][:, None] - anchor_x[:, 0][None, :]
        low = np.where(delta >= 0, delta * g_min, delta * g_max)
        high = np.where(delta >= 0, delta * g_max, delta * g_min)
        lower[:] = np.max(anchor_pilot[None, :] + low, axis=1)
        upper[:] = np.min(anchor_pilot[None, :] + high, axis=1)
        return lower, upper
    for ell, target in enumerate(targets):
        # S[i, k] = grad(X_k) . (target - X_i)
        remainders = (target[None, :] - anchor_x) @ gradients.T
        lower[ell] = np.max(anchor_pilot + remainders.min(axis=1))
        upper[ell] = np.min(anchor_pilot + remainders.max(axis=1))
    return lower, upper


def _target_chunks(m: int, n_jobs: int):
    n_chunks = max(1, min(m, 4 * max(1, n_jobs)))
    return [chunk for chunk in np.array_split(np.arange(m), n_chunks) if chunk.size]


def bounds_order_one(samples: SampleSet, derivs: DerivativeField, targets,
                     anchor_subset: Optional[Sequence[int]] = None, n_jobs: int = 1) -> BoundTable:
    """
    Order-one extrapolation bounds for arbitrary dimension.

    For every target, each anchor i yields the envelope
    pilot_i + [min_k, max_k] grad(X_k) . (target - X_i), where k ranges over
    all samples even when the anchors are subselected. The lower bound is the
    largest lower envelope, the upper bound the smallest upper envelope.

    Args:
        samples (SampleSet): Covariates and pilot predictions
        derivs (DerivativeField): Order-one gradients at every sample
        targets: (m, d) target points
        anchor_subset (Sequence[int], optional): 0-based anchor indices; all samples if None
        n_jobs (int): Parallel workers over blocks of targets

    Returns:
        BoundTable: Clamped bounds at every target
    """
    if derivs.mode != ORDER_ONE:
        fail("bounds_order_one needs an order-one derivative field")
    if derivs.n != samples.n or derivs.values.shape[1] != samples.d:
        fail(f"derivative field is {derivs.values.shape}, expected ({samples.n}, {samples.d})")
    targets = _check_targets(targets, samples.d)
    anchors = _check_anchors(anchor_subset, samples.n)
    if targets.shape[0] == 0:
        return BoundTable(targets, np.empty(0), np.empty(0))

    gradients = np.unique(derivs.values, axis=0)
    chunks = _target_chunks(targets.shape[0], n_jobs)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_order_one_chunk)(samples.covariates, samples.pilot, gradients, anchors, targets[chunk])
        for chunk in chunks
    )
    raw_lower = np.concatenate([r[0] for r in results])
    raw_upper = np.concatenate([r[1] for r in results])
    lower, upper, clamped = _clamp_arrays(raw_lower, raw_upper)
    if np.any(clamped):
        logger.debug(f"{int(clamped.sum())} of {clamped.size} targets had crossing bounds and were clamped")
    return BoundTable(targets, lower, upper, clamped)


def bounds_one_dim(samples: SampleSet, derivs: DerivativeField, targets, q: int,
                   anchor_subset: Optional[Sequence[int]] = None) -> BoundTable:
    """
    One-dimensional extrapolation bounds of arbitrary order q.

    Each anchor contributes its order-(q-1) Taylor polynomial plus the q-th
    order remainder evaluated with the smallest/largest q-th derivative seen
    at any sample.

    Args:
        samples (SampleSet): One-dimensional covariates and pilot predictions
        derivs (DerivativeField): One-dimensional field carrying orders 1..q
        targets: (m, 1) target points
        q (int): Expansion order
        anchor_subset (Sequence[int], optional): 0-based anchor indices

    Returns:
        BoundTable: Clamped bounds at every target
    """
    if int(q) < 1:
        fail(f"expansion order must be at least 1, got {q}")
    q = int(q)
    if samples.d != 1:
        fail(f"one-dimensional bounds need d = 1, got d = {samples.d}")
    if derivs.n != samples.n:
        fail(f"derivative field has {derivs.n} rows, expected {samples.n}")
    # An order-one field at d = 1 is a one-dimensional field of order 1
    values = derivs.values
    if values.shape[1] < q:
        fail(f"derivative field carries orders 1..{values.shape[1]}, order {q} requested")
    targets = _check_targets(targets, 1)
    anchors = _check_anchors(anchor_subset, samples.n)
    if targets.shape[0] == 0:
        return BoundTable(targets, np.empty(0), np.empty(0))

    x = samples.covariates[anchors, 0]
    delta = targets[:, 0][:, None] - x[None, :]
    taylor = np.broadcast_to(samples.pilot[anchors][None, :], delta.shape).copy()
    for k in range(1, q):
        taylor += values[anchors, k - 1][None, :] * delta ** k / factorial(k)
    top = values[:, q - 1]
    factor = delta ** q / factorial(q)
    low = np.where(factor >= 0, factor * top.min(), factor * top.max())
    high = np.where(factor >= 0, factor * top.max(), factor * top.min())
    raw_lower = np.max(taylor + low, axis=1)
    raw_upper = np.min(taylor + high, axis=1)
    lower, upper, clamped = _clamp_arrays(raw_lower, raw_upper)
    return BoundTable(targets, lower, upper, clamped)


def select_anchors(samples: SampleSet, derivs: DerivativeField, target, k: int,
                   metric: str = "scaled") -> np.ndarray:
    """
    Indices of the k anchors closest to a target.

    The scaled metric measures offsets through the covariance of the gradient
    rows, ``sqrt(delta^T C delta)``, so that directions in which the
    derivatives never change cost nothing. When all scaled distances agree
    (degenerate covariance) the ordering falls back to Euclidean distance.

    Args:
        samples (SampleSet): Candidate anchors
        derivs (DerivativeField): Order-one gradients (used by the scaled metric)
        target: Target point of length d
        k (int): Number of anchors to keep
        metric (str): "scaled" or "euclidean"

    Returns:
        np.ndarray: 0-based indices, closest first, ties broken by index
    """
    if int(k) < 1:
        fail(f"anchor count must be at least 1, got {k}")
    if metric not in ("scaled", "euclidean"):
        fail(f"unknown anchor metric '{metric}'")
    target = as_vector("target", target, length=samples.d)
    if derivs.n != samples.n:
        fail(f"derivative field has {derivs.n} rows, expected {samples.n}")
    if metric == "scaled" and derivs.values.shape[1] != samples.d:
        fail(f"scaled anchor metric needs {samples.d} gradient columns, got {derivs.values.shape[1]}")
    if k >= samples.n:
        return np.arange(samples.n)

    offsets = samples.covariates - target[None, :]
    euclidean = np.sqrt(np.sum(offsets ** 2, axis=1))
    distances = euclidean
    if metric == "scaled":
        gradients = derivs.values
        mean = gradients.mean(axis=0)
        covariance = gradients.T @ gradients / gradients.shape[0] - np.outer(mean, mean)
        eigval, eigvec = np.linalg.eigh((covariance + covariance.T) / 2.0)
        rotated = (offsets @ eigvec) * np.sqrt(np.clip(eigval, 0.0, None))[None, :]
        scaled = np.sqrt(np.sum(rotated ** 2, axis=1))
        if scaled.max() - scaled.min() > DEGENERATE_DISTANCE_TOL:
            distances = scaled
        else:
            logger.debug("gradient covariance is degenerate, ordering anchors by Euclidean distance")
    return np.argsort(distances, kind="stable")[: int(k)]
