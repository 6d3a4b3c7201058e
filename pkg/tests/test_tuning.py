import numpy as np
import pytest

from src.core.bounds import SampleSet
from src.core.exceptions import InputValidationError
from src.core.forest import ForestParams, WeightMatrix
from src.core.tuning import (PINBALL, TuningGrid, default_forest_grid, heldout_losses, pointwise_loss,
                             select_parameters, tune)
from src.utils.numeric import fold_indices


@pytest.fixture
def loss_table():
    """Cell (1, 1) is best, (0, 1) lies inside the band and the constant offsets (0, 0) and (1, 0) outside it."""
    losses = np.empty((2, 2, 4))
    losses[0, 0] = [4.0, 4.0, 4.0, 4.0]
    losses[0, 1] = [0.1, 0.0, 0.0, 0.0]
    losses[1, 0] = [5.0, 5.0, 5.0, 5.0]
    losses[1, 1] = [0.0, 0.0, 0.0, 0.0]
    return losses


class TestSelectParameters:

    def test_most_regularized_cell_inside_band(self, loss_table):
        assert select_parameters(loss_table, tol=1.5) == (0, 1)

    def test_zero_tolerance_is_argmin(self, loss_table):
        assert select_parameters(loss_table, tol=0.0) == (1, 1)

    def test_infinite_tolerance_keeps_constant_offsets_out(self, loss_table):
        assert select_parameters(loss_table, tol=np.inf) == (0, 1)

    def test_constant_offset_is_never_admissible(self):
        losses = np.zeros((2, 1, 3))
        losses[0, 0] = 0.3
        assert select_parameters(losses, tol=2.0) == (1, 0)

    def test_noisy_offset_inside_band(self):
        losses = np.zeros((2, 1, 3))
        losses[0, 0] = [0.3, 0.0, 0.0]
        # sd of the differences is sqrt(0.02), so the band is 2 * 0.1414 / sqrt(3) > 0.1
        assert select_parameters(losses, tol=2.0) == (0, 0)
        assert select_parameters(losses, tol=1.0) == (1, 0)

    def test_ties_go_to_most_regularized(self):
        losses = np.tile(np.array([1.0, 2.0, 0.5]), (3, 4, 1))
        assert select_parameters(losses, tol=1.0) == (0, 0)
        assert select_parameters(losses, tol=0.0) == (0, 0)

    def test_singleton_grid(self, rng):
        assert select_parameters(rng.uniform(size=(1, 1, 10)), tol=1.0) == (0, 0)

    def test_rows_are_searched_before_columns(self):
        losses = np.zeros((2, 2, 3))
        losses[0, 0] = 10.0
        losses[0, 1] = [0.3, 0.0, 0.0]
        losses[1, 0] = [0.3, 0.0, 0.0]
        assert select_parameters(losses, tol=1.5) == (0, 1)

    @pytest.mark.parametrize("shape", [(2, 2), (0, 2, 3), (2, 0, 3)])
    def test_bad_shapes(self, shape):
        with pytest.raises(InputValidationError):
            select_parameters(np.zeros(shape), tol=1.0)


class TestTuningGrid:

    def test_defaults(self):
        grid = TuningGrid()
        assert grid.shape == (5, 6)
        assert [p.impurity_tol for p in grid.forest_params] == [100.0, 10.0, 1.0, 0.1, 0.01]
        assert grid.penalties[-1] == 0.0

    @pytest.mark.parametrize("penalties", [(1.0, 1.0), (0.0, 1.0), (1.0, -1.0), ()])
    def test_penalties_must_decrease(self, penalties):
        with pytest.raises(InputValidationError):
            TuningGrid(penalties=penalties)

    def test_empty_forest_grid(self):
        with pytest.raises(InputValidationError):
            TuningGrid(forest_params=())

    @pytest.mark.parametrize("changes", [{"tol": -1.0}, {"folds": 1}, {"loss": "absolute"},
                                         {"quantile_level": 1.0}])
    def test_invalid_settings(self, changes):
        with pytest.raises(InputValidationError):
            TuningGrid(**changes)

    def test_default_forest_grid_keeps_base(self):
        grid = default_forest_grid(ForestParams(n_trees=7, seed=3))
        assert all(p.n_trees == 7 and p.seed == 3 for p in grid)


def test_pointwise_losses():
    np.testing.assert_allclose(pointwise_loss([1.0, 1.0], [3.0, 0.0]), [4.0, 1.0])
    np.testing.assert_allclose(pointwise_loss([1.0, 1.0], [3.0, 0.0], PINBALL, 0.25), [0.5, 0.75])


def test_heldout_losses_vanish_for_linear_pilot():
    t = np.linspace(-1.0, 1.0, 20)
    samples = SampleSet(t[:, None], 2.0 - t)
    weights = WeightMatrix(np.full((20, 20), 1.0 / 20))
    losses = heldout_losses(samples, weights, [1.0], 1, (1.0, 0.0), fold_indices(20, 4, seed=0))
    assert losses.shape == (2, 20)
    np.testing.assert_allclose(losses, 0.0, atol=1e-12)


def test_heldout_rows_without_support_fall_back_to_uniform():
    t = np.linspace(-1.0, 1.0, 8)
    samples = SampleSet(t[:, None], 1.0 + 3.0 * t)
    # Every sample only sees itself, so held-out rows lose all support
    losses = heldout_losses(samples, WeightMatrix(np.eye(8)), [1.0], 1, (0.0,), fold_indices(8, 2, seed=1))
    np.testing.assert_allclose(losses, 0.0, atol=1e-12)


class TestTune:

    def test_singleton_grid_returns_its_entry(self, linear_samples, small_forest):
        grid = TuningGrid(forest_params=(small_forest,), penalties=(0.5,), folds=3)
        result = tune(linear_samples, [1.0, 0.0], grid, seed=2)
        assert result.forest_params == small_forest
        assert result.penalty == 0.5
        assert result.index == (0, 0)
        assert result.mean_losses.shape == (1, 1)

    def test_grid_shape_and_determinism(self, linear_samples, small_forest):
        grid = TuningGrid(forest_params=(small_forest.replace(impurity_tol=1.0), small_forest),
                          penalties=(1.0, 0.0), folds=3)
        first = tune(linear_samples, [0.0, 1.0], grid, seed=5)
        second = tune(linear_samples, [0.0, 1.0], grid, seed=5)
        assert first.mean_losses.shape == (2, 2)
        np.testing.assert_array_equal(first.mean_losses, second.mean_losses)
        assert first.index == second.index
        assert first.forest_params == grid.forest_params[first.index[0]]
        assert first.penalty == grid.penalties[first.index[1]]
