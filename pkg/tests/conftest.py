"""
Shared fixtures for the test suite.
"""
import numpy as np
import pandas as pd
import pytest

from src.core.bounds import SampleSet
from src.core.forest import ForestParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_forest():
    """Fast forest settings for unit tests."""
    return ForestParams(n_trees=20, min_samples_leaf=3, seed=7)


@pytest.fixture
def linear_samples(rng):
    """Pilot 1 + 2 * x1 that ignores x2."""
    X = rng.uniform(-1.0, 1.0, (60, 2))
    return SampleSet(X, 1.0 + 2.0 * X[:, 0])


@pytest.fixture
def write_csv(tmp_path):
    """Write a dict of columns to a CSV file under tmp_path and return its path."""
    def write(name, columns):
        path = tmp_path / name
        pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")
        return str(path)
    return write
