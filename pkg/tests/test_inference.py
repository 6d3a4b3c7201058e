import numpy as np
import pandas as pd
import pytest

from src.core.bounds import BoundTable, DerivativeField, SampleSet, bounds_order_one
from src.core.exceptions import ComputationError, InputValidationError
from src.core.forest import ForestParams
from src.core.inference import (IntervalTable, bootstrap_confidence_interval, cv_residual_std, extrapolation_score,
                                extrapolation_splits, interval_coverage, interval_width_score, make_bounds_pipeline,
                                midpoint_prediction, prediction_interval, rolling_coverage)


def table(lower, upper):
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    return BoundTable(np.arange(lower.size, dtype=float)[:, None], lower, upper)


def mean_fitter(covariates, responses):
    mean = float(np.mean(responses))
    return lambda points: np.full(len(points), mean)


def ols_pipeline(covariates, responses, targets):
    design = np.column_stack([np.ones(len(covariates)), covariates])
    coef, _, _, _ = np.linalg.lstsq(design, responses, rcond=None)
    value = np.column_stack([np.ones(len(targets)), targets]) @ coef
    return BoundTable(targets, value, value)


@pytest.mark.parametrize("lower, upper, expected", [(1.0, 3.0, 2.0), (5.0, 5.0, 5.0), (-2.0, 4.0, 1.0)])
def test_midpoint_prediction(lower, upper, expected):
    assert midpoint_prediction(table(lower, upper))[0] == expected


def test_midpoint_is_worst_case_optimal():
    rng = np.random.default_rng(99)
    ends = np.sort(rng.normal(scale=5.0, size=(100_000, 2)), axis=1)
    guesses = rng.normal(scale=5.0, size=100_000)
    bounds = table(ends[:, 0], ends[:, 1])
    mid = midpoint_prediction(bounds)
    worst_mid = np.maximum(np.abs(bounds.lower - mid), np.abs(bounds.upper - mid))
    worst_guess = np.maximum(np.abs(bounds.lower - guesses), np.abs(bounds.upper - guesses))
    np.testing.assert_allclose(worst_mid, bounds.width / 2, rtol=1e-12, atol=1e-12)
    assert np.all(worst_guess >= bounds.width / 2 - 1e-12)
    at_mid = np.isclose(worst_guess, bounds.width / 2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(guesses[at_mid], mid[at_mid], atol=1e-9)


class TestPredictionInterval:

    def test_columns_are_taken_from_each_table(self):
        result = prediction_interval(table(0.0, 1.0), table(1.5, 2.0), alpha=0.1)
        assert (result.lo[0], result.hi[0]) == (0.0, 2.0)
        assert result.n_crossed == 0

    def test_crossing_ends_are_averaged(self):
        result = prediction_interval(table(2.0, 2.5), table(0.0, 1.0), alpha=0.2)
        assert (result.lo[0], result.hi[0]) == (1.5, 1.5)
        assert result.n_crossed == 1

    def test_identical_pilots_on_support(self):
        bounds = table([1.0, 2.0], [1.0, 2.0])
        result = prediction_interval(bounds, bounds, alpha=0.1)
        np.testing.assert_array_equal(result.hi - result.lo, 0.0)

    def test_tables_must_share_targets(self):
        other = BoundTable([[7.0]], [0.0], [1.0])
        with pytest.raises(InputValidationError):
            prediction_interval(table(0.0, 1.0), other, alpha=0.1)

    def test_frame(self):
        frame = prediction_interval(table(0.0, 1.0), table(1.5, 2.0), alpha=0.1).to_frame()
        assert list(frame.columns) == ["x1", "lo", "hi"]


class TestBootstrap:

    def test_constant_pipeline(self, rng):
        def pipeline(covariates, responses, targets):
            return BoundTable(targets, [-1.0], [3.0])

        result = bootstrap_confidence_interval(rng.normal(size=(20, 1)), rng.normal(size=20), pipeline, [0.0],
                                               alpha=0.05, B=10)
        assert (result.lo, result.hi, result.n_dropped) == (-1.0, 3.0, 0)

    def test_two_replicates(self, rng):
        values = iter([1.0, 3.0])

        def pipeline(covariates, responses, targets):
            lower = next(values)
            return BoundTable(targets, [lower], [lower + 1.0])

        result = bootstrap_confidence_interval(rng.normal(size=(5, 1)), rng.normal(size=5), pipeline, [0.0],
                                               alpha=0.5, B=2)
        assert (result.lo, result.hi) == (1.0, 4.0)

    def test_failed_replicates_are_dropped(self, rng):
        calls = iter(range(10))

        def pipeline(covariates, responses, targets):
            if next(calls) == 0:
                raise ComputationError("singular")
            return BoundTable(targets, [0.0], [1.0])

        result = bootstrap_confidence_interval(rng.normal(size=(5, 1)), rng.normal(size=5), pipeline, [0.0],
                                               alpha=0.1, B=10)
        assert result.n_dropped == 1

    def test_too_many_failures(self, rng):
        def pipeline(covariates, responses, targets):
            raise ComputationError("singular")

        with pytest.raises(ComputationError):
            bootstrap_confidence_interval(rng.normal(size=(5, 1)), rng.normal(size=5), pipeline, [0.0],
                                          alpha=0.1, B=5)

    def test_needs_two_replicates(self, rng):
        with pytest.raises(InputValidationError):
            bootstrap_confidence_interval(rng.normal(size=(5, 1)), rng.normal(size=5), None, [0.0], alpha=0.1, B=1)

    def test_forest_pipeline_brackets_a_line(self, rng):
        X = rng.uniform(-1.0, 1.0, (60, 1))
        y = 1.0 + X[:, 0] + 0.05 * rng.standard_normal(60)
        pipeline = make_bounds_pipeline(pilot_params=ForestParams(n_trees=20, seed=1),
                                        forest_params=ForestParams(n_trees=20, min_samples_leaf=3, seed=2))
        result = bootstrap_confidence_interval(X, y, pipeline, [0.0], alpha=0.2, B=4, seed=3)
        assert result.lo <= result.hi
        assert result.lo < 1.5 and result.hi > 0.5


    def test_same_seed_and_size_repeat(self, rng):
        X = rng.normal(size=(30, 1))
        y = 1.0 + X[:, 0] + rng.normal(size=30)
        first = bootstrap_confidence_interval(X, y, ols_pipeline, [2.0], alpha=0.1, B=25, seed=8)
        again = bootstrap_confidence_interval(X, y, ols_pipeline, [2.0], alpha=0.1, B=25, seed=8, n_jobs=2)
        assert first == again
        assert bootstrap_confidence_interval(X, y, ols_pipeline, [2.0], alpha=0.1, B=25, seed=9) != first


@pytest.mark.slow
def test_bootstrap_coverage_over_repeated_samples():
    rng = np.random.default_rng(17)
    covered = 0
    for rep in range(200):
        X = rng.uniform(-1.0, 1.0, (100, 1))
        y = 1.0 + 2.0 * X[:, 0] + 0.5 * rng.standard_normal(100)
        result = bootstrap_confidence_interval(X, y, ols_pipeline, [1.5], alpha=0.1, B=200, seed=rep)
        covered += result.lo <= 4.0 <= result.hi
    assert covered / 200 >= 0.8


class TestResidualScale:

    def test_two_fold_hand_example(self):
        assert cv_residual_std([[0.0], [1.0]], [0.0, 2.0], mean_fitter, folds=2) == pytest.approx(2.0)

    def test_exact_pilot(self, rng):
        X = rng.normal(size=(30, 2))

        def fitter(covariates, responses):
            return lambda points: 3.0 * points[:, 0]

        assert cv_residual_std(X, 3.0 * X[:, 0], fitter, folds=5) == pytest.approx(0.0, abs=1e-12)

    def test_pure_noise(self):
        rng = np.random.default_rng(8)
        y = 0.5 * rng.standard_normal(2000)
        sigma = cv_residual_std(rng.normal(size=(2000, 1)), y, mean_fitter, folds=5, seed=1)
        assert sigma == pytest.approx(0.5, rel=0.15)


class TestScores:

    @pytest.mark.parametrize("width, sigma, expected", [(0.0, 1.0, 0.0), (0.5, 0.1, 5.0), (0.1, 0.1, 1.0)])
    def test_extrapolation_score(self, width, sigma, expected):
        result = extrapolation_score(table(1.0, 1.0 + width), sigma)
        assert result.score[0] == pytest.approx(expected)
        assert result.sigma == sigma

    def test_sigma_must_be_positive(self):
        with pytest.raises(InputValidationError):
            extrapolation_score(table(0.0, 1.0), 0.0)

    @pytest.mark.parametrize("first, second, expected", [(0.0, 0.0, 0.0), (0.3, 0.7, 1.0), (0.0, 0.4, 0.4)])
    def test_interval_width_score(self, first, second, expected):
        assert interval_width_score(table(0.0, first), table(2.0, 2.0 + second))[0] == pytest.approx(expected)

    def test_score_frame(self):
        frame = extrapolation_score(table([0.0, 1.0], [1.0, 1.5]), 0.5).to_frame()
        assert list(frame.columns) == ["x1", "score"]
        np.testing.assert_allclose(frame["score"], [2.0, 1.0])

    def test_more_anchors_never_raise_scores(self, rng):
        X = rng.uniform(-1.0, 1.0, (40, 2))
        samples = SampleSet(X, np.sin(X[:, 0]) + X[:, 1] ** 2)
        derivs = DerivativeField.order_one(np.column_stack([np.cos(X[:, 0]), 2.0 * X[:, 1]]))
        targets = rng.uniform(-2.0, 2.0, (30, 2))
        scores = [extrapolation_score(bounds_order_one(samples, derivs, targets, anchor_subset=anchors), 0.1).score
                  for anchors in (range(0, 40, 4), range(0, 40, 2), range(40))]
        for fewer, more in zip(scores, scores[1:]):
            assert np.all(more <= fewer + 1e-12)


class TestCoverage:

    def test_interval_coverage(self):
        intervals = IntervalTable(np.zeros((4, 1)), [0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], alpha=0.1)
        assert interval_coverage(intervals, [0.5, 1.0, -0.1, 2.0]) == 0.5

    def test_extrapolation_splits_hold_out_contiguous_ranges(self):
        X = np.column_stack([np.arange(10.0)[::-1], np.zeros(10)])
        splits = extrapolation_splits(X, column=0, n_splits=2)
        assert len(splits) == 2
        train, test = splits[0]
        np.testing.assert_array_equal(np.sort(X[test, 0]), [0.0, 1.0, 2.0, 3.0, 4.0])
        assert set(train) | set(test) == set(range(10))
        assert not set(train) & set(test)

    def test_extrapolation_splits_validate(self):
        with pytest.raises(InputValidationError):
            extrapolation_splits(np.zeros((5, 1)), column=1, n_splits=2)
        with pytest.raises(InputValidationError):
            extrapolation_splits(np.zeros((5, 1)), column=0, n_splits=6)

    def test_rolling_coverage(self):
        frame = rolling_coverage([3.0, 1.0, 2.0, 4.0], [False, True, True, False], window=2)
        expected = pd.DataFrame({"score": [2.0, 3.0, 4.0], "coverage": [1.0, 0.5, 0.0]})
        pd.testing.assert_frame_equal(frame, expected)
