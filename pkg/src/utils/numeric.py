"""
Array validation, small batched solvers and seeding helpers.
"""
from typing import List, Optional

import numpy as np
from loguru import logger

from src.core.exceptions import InputValidationError

# Relative eigenvalue floor below which a normal-equation block counts as degenerate
DEGENERATE_RTOL = 1e-10
RIDGE_JITTER = 1e-10


def fail(msg: str):
    """Log and raise an input validation error."""
    logger.error(msg)
    raise InputValidationError(msg)


def as_matrix(name: str, values, n_cols: Optional[int] = None, allow_empty: bool = False) -> np.ndarray:
    """
    Convert to a finite float64 matrix.

    Args:
        name (str): Name used in error messages
        values: Array-like with two dimensions (a 1-D input is read as one column)
        n_cols (int, optional): Required number of columns
        allow_empty (bool): Whether zero rows are accepted

    Returns:
        np.ndarray: Copy of the data as a (rows, cols) float64 array
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if n_cols in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        fail(f"{name} must be a matrix, got an array with {arr.ndim} dimensions")
    if arr.shape[0] == 0 and not allow_empty:
        fail(f"{name} must contain at least one row")
    if n_cols is not None and arr.shape[1] != n_cols:
        fail(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    if not np.all(np.isfinite(arr)):
        fail(f"{name} contains non-finite entries")
    return arr


def as_vector(name: str, values, length: Optional[int] = None) -> np.ndarray:
    """Convert to a finite float64 vector, optionally of a fixed length."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if length is not None and arr.shape[0] != length:
        fail(f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        fail(f"{name} contains non-finite entries")
    return arr


def check_level(name: str, alpha: float) -> float:
    """Validate a probability level strictly inside (0, 1)."""
    if not (0.0 < float(alpha) < 1.0):
        fail(f"{name} must lie in (0, 1), got {alpha}")
    return float(alpha)


def weighted_quantile(values, weights, level: float) -> float:
    """
    Quantile of a weighted empirical distribution.

    The smallest value whose cumulative weight reaches the level (the
    infimum convention for quantiles).

    Args:
        values: Observed values
        weights: Non-negative weights, not necessarily normalised
        level (float): Quantile level in (0, 1)

    Returns:
        float: The quantile
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = weights.sum()
    if values.size == 0 or total <= 0:
        fail("weighted quantile needs at least one positive weight")
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order]) / total
    # Tolerance absorbs round-off in the cumulative sums
    position = int(np.searchsorted(cumulative, level - 1e-12, side="left"))
    return float(values[order][min(position, values.size - 1)])


def empirical_quantile(values, level: float) -> float:
    """Unweighted version of weighted_quantile."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return weighted_quantile(values, np.ones_like(values), level)


def solve_normal_equations(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Solve a stack of small symmetric normal-equation systems.

    Blocks whose smallest eigenvalue falls below DEGENERATE_RTOL times the
    largest receive a ridge of RIDGE_JITTER times their largest diagonal
    entry; well-posed blocks are solved exactly.

    Args:
        gram (np.ndarray): (batch, p, p) positive semi-definite matrices
        rhs (np.ndarray): (batch, p) right-hand sides

    Returns:
        np.ndarray: (batch, p) solutions
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] == 0:
        return np.zeros_like(rhs)
    return np.linalg.solve(regularize_gram(gram), rhs[..., None])[..., 0]


def regularize_gram(gram: np.ndarray) -> np.ndarray:
    """Copy of a (batch, p, p) stack with the ridge jitter added to degenerate blocks."""
    gram = np.array(gram, dtype=np.float64)
    if gram.shape[0] == 0:
        return gram
    eig = np.linalg.eigvalsh(gram)
    top = np.maximum(eig[:, -1], 0.0)
    degenerate = eig[:, 0] <= DEGENERATE_RTOL * top
    if np.any(degenerate):
        diag_max = np.max(np.diagonal(gram, axis1=1, axis2=2), axis=1)
        jitter = np.where(degenerate, RIDGE_JITTER * np.maximum(diag_max, np.finfo(float).tiny), 0.0)
        gram += jitter[:, None, None] * np.eye(gram.shape[1])[None, :, :]
    return gram


def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    """Independent child seed sequences, one per task; fixed by (seed, index)."""
    return np.random.SeedSequence(int(seed)).spawn(int(count))


def fold_indices(n: int, folds: int, seed: int) -> List[np.ndarray]:
    """Split range(n) into near-equal disjoint folds after a seeded permutation."""
    if folds < 2:
        fail(f"need at least 2 folds, got {folds}")
    if n < folds:
        fail(f"cannot split {n} samples into {folds} folds")
    permutation = np.random.default_rng(int(seed)).permutation(n)
    return [np.sort(part) for part in np.array_split(permutation, folds)]
