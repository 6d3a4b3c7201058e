"""
Forest-weighted local polynomial derivative estimation.

Every sample i gets a polynomial of degree q + 1 in the projected offset
(X_l - X_i)^T v, fitted to the pilot values with the forest weights of row i.
The coefficient of degree k times k! estimates the k-th directional
derivative at X_i. The penalized variant couples all samples through a
smoothness penalty on the derivative coefficients and is solved jointly.
"""
from dataclasses import dataclass
from math import factorial
from typing import Optional, Tuple

import numpy as np
from loguru import logger
from scipy.sparse.linalg import LinearOperator, cg

from src.core.bounds import SampleSet
from src.core.exceptions import ComputationError, ConvergenceError
from src.core.forest import ForestParams, Forest, WeightMatrix, extract_weights, fit_poly_forest
from src.utils.numeric import as_vector, fail, regularize_gram

CG_RTOL = 1e-8
# Largest joint system (n * (q + 2) unknowns) still solved densely when CG stalls
DENSE_FALLBACK_SIZE = 4000
ROW_CHUNK = 256


@dataclass(frozen=True)
class LocPolCoefficients:
    """Local polynomial coefficients, row i holds degrees 0..q+1 at sample i."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        if beta.ndim != 2 or beta.shape[1] < 3:
            fail(f"coefficients must be an (n, q + 2) matrix with q >= 1, got shape {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ComputationError("local polynomial coefficients contain non-finite entries")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def n(self) -> int:
        return self.beta.shape[0]

    @property
    def q(self) -> int:
        return self.beta.shape[1] - 2

    @property
    def fitted(self) -> np.ndarray:
        """Degree-0 coefficients, the local fits at the samples themselves."""
        return self.beta[:, 0]

    def derivative(self, k: int) -> np.ndarray:
        """k-th directional derivative estimate k! * beta[:, k]."""
        if not 1 <= int(k) <= self.q:
            fail(f"derivative order must lie in [1, {self.q}], got {k}")
        return factorial(int(k)) * self.beta[:, int(k)]

    def derivatives(self) -> np.ndarray:
        """(n, q) matrix of the derivative estimates of orders 1..q."""
        return np.column_stack([self.derivative(k) for k in range(1, self.q + 1)])


def _check_inputs(samples: SampleSet, weights: WeightMatrix, v, q: int) -> Tuple[np.ndarray, int]:
    if weights.n != samples.n:
        fail(f"weight matrix is {weights.n} x {weights.n}, expected {samples.n} x {samples.n}")
    if int(q) < 1:
        fail(f"order must be at least 1, got {q}")
    v = as_vector("direction", v, length=samples.d)
    if np.linalg.norm(v) == 0:
        fail("direction must be non-zero")
    return samples.covariates @ v, int(q)


def _local_systems(t: np.ndarray, y: np.ndarray, W: np.ndarray, q: int):
    """
    Normal equations of every per-sample fit on rescaled offsets.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: regularized grams (n, p, p),
        right-hand sides (n, p) and the offset scales (n,)
    """
    n = t.shape[0]
    p = q + 2
    degrees = np.arange(p)
    gram = np.empty((n, p, p))
    rhs = np.empty((n, p))
    scale = np.empty(n)
    empty_rows = np.flatnonzero(W.sum(axis=1) <= 0)
    if empty_rows.size:
        msg = (f"{empty_rows.size} weight rows are all zero (first: sample {empty_rows[0]}); "
               f"the sample never shares a leaf with any evaluation point")
        logger.error(msg)
        raise ComputationError(msg)

    for start in range(0, n, ROW_CHUNK):
        rows = np.arange(start, min(start + ROW_CHUNK, n))
        w = W[rows]
        offsets = t[None, :] - t[rows][:, None]
        # Largest projected offset among points carrying weight
        row_scale = np.max(np.where(w > 0, np.abs(offsets), 0.0), axis=1)
        row_scale[row_scale == 0] = 1.0
        powers = (offsets / row_scale[:, None])[:, :, None] ** degrees[None, None, :]
        weighted = powers * w[:, :, None]
        gram[rows] = np.einsum("cnj,cnk->cjk", weighted, powers)
        rhs[rows] = np.einsum("cnj,n->cj", weighted, y)
        scale[rows] = row_scale
    return regularize_gram(gram), rhs, scale


def _unscale(gamma: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return gamma / scale[:, None] ** np.arange(gamma.shape[1])[None, :]


def weighted_locpol(samples: SampleSet, weights: WeightMatrix, v, q: int) -> LocPolCoefficients:
    """
    Independent weighted polynomial fits of degree q + 1, one per sample.

    Args:
        samples (SampleSet): Covariates and pilot values
        weights (WeightMatrix): Entry (i, l) weights sample l in the fit at sample i
        v: Projection direction of length d
        q (int): Highest derivative order of interest

    Returns:
        LocPolCoefficients: (n, q + 2) coefficients
    """
    t, q = _check_inputs(samples, weights, v, q)
    gram, rhs, scale = _local_systems(t, samples.pilot, weights.entries, q)
    gamma = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return LocPolCoefficients(_unscale(gamma, scale))


class _JointSystem:
    """Normal equations of the penalized fit in rescaled coefficients."""

    def __init__(self, gram: np.ndarray, rhs: np.ndarray, scale: np.ndarray, W: np.ndarray, lam: float):
        self.gram = gram
        self.rhs = rhs
        self.n, self.p = rhs.shape
        self.lam = float(lam)
        self.laplacian = np.diag(W.sum(axis=1)) - W
        # penalty weight (j!)^2 / s_i^j for every coefficient, degree 0 unpenalized
        self.factor = np.zeros((self.n, self.p))
        for j in range(1, self.p):
            self.factor[:, j] = factorial(j) / scale ** j

    @property
    def size(self) -> int:
        return self.n * self.p

    def matvec(self, x: np.ndarray) -> np.ndarray:
        gamma = x.reshape(self.n, self.p)
        out = np.einsum("ijk,ik->ij", self.gram, gamma)
        if self.lam > 0:
            scaled = gamma * self.factor
            out += self.lam * self.factor * (self.laplacian.T @ (self.laplacian @ scaled))
        return out.reshape(-1)

    def preconditioner(self) -> LinearOperator:
        """Block-Jacobi: per-sample gram plus the diagonal of the penalty."""
        diag = np.einsum("li,li->i", self.laplacian, self.laplacian)
        blocks = self.gram.copy()
        idx = np.arange(self.p)
        blocks[:, idx, idx] += self.lam * diag[:, None] * self.factor ** 2
        inverse = np.linalg.inv(blocks)
        return LinearOperator(
            (self.size, self.size),
            matvec=lambda r: np.einsum("ijk,ik->ij", inverse, r.reshape(self.n, self.p)).reshape(-1),
        )

    def dense(self) -> np.ndarray:
        matrix = np.zeros((self.size, self.size))
        for i in range(self.n):
            block = slice(i * self.p, (i + 1) * self.p)
            matrix[block, block] = self.gram[i]
        if self.lam > 0:
            penalty = self.laplacian.T @ self.laplacian
            for j in range(1, self.p):
                cols = np.arange(self.n) * self.p + j
                matrix[np.ix_(cols, cols)] += self.lam * np.outer(self.factor[:, j], self.factor[:, j]) * penalty
        return matrix


def penalized_locpol(samples: SampleSet, weights: WeightMatrix, v, q: int, lam: float,
                     solver: str = "auto", warm_start: bool = True, rtol: float = CG_RTOL) -> LocPolCoefficients:
    """
    Jointly penalized local polynomial fit.

    Minimizes the sum of all per-sample weighted losses plus
    lam * sum_i sum_{j>=1} (sum_l W[i, l] (j! beta[i, j] - j! beta[l, j]))^2
    with preconditioned conjugate gradients on the joint normal equations.
    lam = 0 reduces to weighted_locpol unless solver="joint" is requested.

    Args:
        samples (SampleSet): Covariates and pilot values
        weights (WeightMatrix): Forest weights
        v: Projection direction of length d
        q (int): Highest derivative order of interest
        lam (float): Non-negative penalty strength
        solver (str): "auto" or "joint"
        warm_start (bool): Start CG from the unpenalized solution
        rtol (float): Relative residual tolerance of the joint solve

    Returns:
        LocPolCoefficients: (n, q + 2) coefficients
    """
    if not float(lam) >= 0 or not np.isfinite(lam):
        fail(f"penalty must be a finite non-negative number, got {lam}")
    if solver not in ("auto", "joint"):
        fail(f"unknown solver '{solver}'")
    if float(lam) == 0 and solver == "auto":
        return weighted_locpol(samples, weights, v, q)

    t, q = _check_inputs(samples, weights, v, q)
    gram, rhs, scale = _local_systems(t, samples.pilot, weights.entries, q)
    system = _JointSystem(gram, rhs, scale, weights.entries, lam)
    x0 = np.linalg.solve(gram, rhs[..., None])[..., 0].reshape(-1) if warm_start else None
    operator = LinearOperator((system.size, system.size), matvec=system.matvec)
    maxiter = 10 * system.size

    solution, info = cg(operator, rhs.reshape(-1), x0=x0, rtol=rtol, maxiter=maxiter,
                        M=system.preconditioner())
    if info < 0:
        msg = f"conjugate gradient breakdown in the penalized fit (info={info})"
        logger.error(msg)
        raise ComputationError(msg)
    if info > 0:
        if system.size > DENSE_FALLBACK_SIZE:
            msg = f"penalized fit did not converge in {maxiter} iterations ({system.size} unknowns)"
            logger.error(msg)
            raise ConvergenceError(msg)
        logger.warning(f"CG did not converge in {maxiter} iterations, falling back to a dense solve")
        solution = np.linalg.solve(system.dense(), rhs.reshape(-1))
    logger.debug(f"penalized fit solved, lambda={lam}, {system.size} unknowns")
    return LocPolCoefficients(_unscale(solution.reshape(system.n, system.p), scale))


def rf_loc_pol_fit(samples: SampleSet, v, q: int, lam: float, params: Optional[ForestParams] = None,
                   n_jobs: int = 1) -> Tuple[LocPolCoefficients, Forest]:
    """
    Polynomial forest, its weights and the penalized local fit in direction v.

    Returns:
        Tuple[LocPolCoefficients, Forest]: coefficients of degrees 0..q+1 and the forest
    """
    forest = fit_poly_forest(samples, v, q, params, n_jobs=n_jobs)
    weights = extract_weights(forest, samples)
    return penalized_locpol(samples, weights, v, q, lam), forest


def rf_loc_pol(samples: SampleSet, k: int, v, lam: float, params: Optional[ForestParams] = None,
               q: Optional[int] = None, n_jobs: int = 1) -> np.ndarray:
    """
    Directional derivative estimates of order k at every sample.

    Args:
        samples (SampleSet): Covariates and pilot values
        k (int): Derivative order
        v: Direction of length d
        lam (float): Penalty strength
        params (ForestParams, optional): Forest hyperparameters
        q (int, optional): Polynomial order configuration, defaults to k
        n_jobs (int): Parallel workers over trees

    Returns:
        np.ndarray: length-n estimates k! * beta[:, k]
    """
    q = int(k) if q is None else int(q)
    if not 1 <= int(k) <= q:
        fail(f"derivative order k must satisfy 1 <= k <= q = {q}, got {k}")
    coefficients, _ = rf_loc_pol_fit(samples, v, q, lam, params, n_jobs=n_jobs)
    return coefficients.derivative(k)
