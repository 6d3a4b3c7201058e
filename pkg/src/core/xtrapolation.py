"""
End-to-end extrapolation bounds from a pilot sample.

The pipeline estimates derivatives with forest-weighted local polynomials,
either the gradient (order one, any dimension) or all derivatives up to
order q (one dimension), and assembles Taylor envelopes at the targets.
"""
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from src.core.bounds import (BoundTable, DerivativeField, SampleSet, bounds_one_dim, bounds_order_one,
                             select_anchors)
from src.core.forest import ForestParams
from src.core.locpol import rf_loc_pol_fit
from src.core.tuning import TuningGrid, tune
from src.utils.numeric import fail, spawn_seeds


class Xtrapolation:
    """Derivative estimation and extrapolation bounds for one pilot sample."""

    def __init__(self, q: int = 1, penalty: float = 0.0, forest_params: Optional[ForestParams] = None,
                 grid: Optional[TuningGrid] = None, n_anchors: Optional[int] = None,
                 anchor_metric: str = "euclidean", seed: int = 0, n_jobs: int = 1,
                 selected: Optional[Sequence[Tuple[ForestParams, float]]] = None):
        """
        Configure the pipeline.

        Args:
            q (int): Derivative order; q > 1 needs one-dimensional covariates
            penalty (float): Penalty strength used when no grid is given
            forest_params (ForestParams, optional): Forest used when no grid is given
            grid (TuningGrid, optional): Tune forest and penalty per direction
            n_anchors (int, optional): Closest anchors kept per target; all if None
            anchor_metric (str): "euclidean" or "scaled"
            seed (int): Seed for forests and folds
            n_jobs (int): Parallel workers
            selected (Sequence, optional): Per-direction forest and penalty from an earlier
                tuned fit; overrides grid, forest_params and penalty
        """
        if int(q) < 1:
            fail(f"order must be at least 1, got {q}")
        if n_anchors is not None and int(n_anchors) < 1:
            fail(f"n_anchors must be positive, got {n_anchors}")
        if anchor_metric not in ("euclidean", "scaled"):
            fail(f"unknown anchor metric '{anchor_metric}'")
        self.q = int(q)
        self.penalty = float(penalty)
        self.forest_params = forest_params or ForestParams()
        self.grid = grid
        self.n_anchors = None if n_anchors is None else int(n_anchors)
        self.anchor_metric = anchor_metric
        self.seed = int(seed)
        self.n_jobs = int(n_jobs)
        self.selected = None if selected is None else list(selected)

        self.samples: Optional[SampleSet] = None
        self.derivative_field: Optional[DerivativeField] = None
        self.selections: List[Tuple[ForestParams, float]] = []

    @property
    def is_fitted(self) -> bool:
        return self.derivative_field is not None

    def _direction_fit(self, samples: SampleSet, v: np.ndarray, seed: int, index: int):
        if self.selected is not None:
            params, penalty = self.selected[index]
            params = params.replace(seed=seed)
        elif self.grid is not None:
            grid = replace(self.grid, forest_params=tuple(p.replace(seed=seed) for p in self.grid.forest_params))
            result = tune(samples, v, grid, q=self.q, seed=seed, n_jobs=self.n_jobs)
            params, penalty = result.forest_params, result.penalty
        else:
            params, penalty = self.forest_params.replace(seed=seed), self.penalty
        coefficients, _ = rf_loc_pol_fit(samples, v, self.q, penalty, params, n_jobs=self.n_jobs)
        self.selections.append((params, penalty))
        return coefficients

    def fit(self, samples: SampleSet) -> "Xtrapolation":
        """
        Estimate the derivative field of the pilot.

        Args:
            samples (SampleSet): Covariates and pilot predictions

        Returns:
            Xtrapolation: self
        """
        if self.q > 1 and samples.d != 1:
            fail(f"derivatives of order {self.q} are only supported for one-dimensional covariates")
        self.samples = samples
        self.selections = []
        n_directions = samples.d if self.q == 1 else 1
        if self.selected is not None and len(self.selected) != n_directions:
            fail(f"expected {n_directions} preselected directions, got {len(self.selected)}")
        seeds = [int(s.generate_state(1)[0]) for s in spawn_seeds(self.seed, samples.d)]

        if self.q == 1:
            gradients = np.empty((samples.n, samples.d))
            for j in range(samples.d):
                # Partial derivative in coordinate j
                coefficients = self._direction_fit(samples, np.eye(samples.d)[j], seeds[j], j)
                gradients[:, j] = coefficients.derivative(1)
            self.derivative_field = DerivativeField.order_one(gradients)
        else:
            coefficients = self._direction_fit(samples, np.ones(1), seeds[0], 0)
            self.derivative_field = DerivativeField.one_dim(coefficients.derivatives())
        logger.info(f"estimated derivatives of order {self.q} at {samples.n} samples in {samples.d} dimensions")
        return self

    def _anchors(self, target: np.ndarray) -> Optional[np.ndarray]:
        if self.n_anchors is None:
            return None
        field = self.derivative_field
        if field.values.shape[1] != self.samples.d:
            field = DerivativeField.order_one(field.values[:, :1])
        return select_anchors(self.samples, field, target, self.n_anchors, metric=self.anchor_metric)

    def _bounds(self, targets: np.ndarray, anchors: Optional[np.ndarray]) -> BoundTable:
        if self.q == 1:
            return bounds_order_one(self.samples, self.derivative_field, targets, anchor_subset=anchors)
        return bounds_one_dim(self.samples, self.derivative_field, targets, self.q, anchor_subset=anchors)

    def predict_bounds(self, targets) -> BoundTable:
        """
        Lower and upper extrapolation bounds at the targets.

        Args:
            targets: (m, d) target points

        Returns:
            BoundTable: Bounds, midpoints and widths
        """
        if not self.is_fitted:
            fail("pipeline must be fitted before predicting bounds")
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 1:
            if targets.size % self.samples.d:
                fail(f"{targets.size} target values cannot form points of dimension {self.samples.d}")
            targets = targets.reshape(-1, self.samples.d)
        if targets.ndim != 2 or targets.shape[1] != self.samples.d:
            fail(f"targets must have shape (m, {self.samples.d}), got {targets.shape}")
        if self.n_anchors is None or self.n_anchors >= self.samples.n:
            if self.q == 1:
                return bounds_order_one(self.samples, self.derivative_field, targets, n_jobs=self.n_jobs)
            return self._bounds(targets, None)
        if targets.shape[0] == 0:
            return self._bounds(targets, None)

        tables = Parallel(n_jobs=self.n_jobs)(
            delayed(self._bounds)(target[None, :], self._anchors(target)) for target in targets
        )
        return BoundTable.concatenate(tables, self.samples.d)
