import json

import pytest

from src.core.exceptions import InputValidationError
from src.utils.config import RunConfig


def test_defaults():
    config = RunConfig()
    assert config.validate() is config
    assert (config.seed, config.q, config.alpha, config.threads) == (0, 1, 0.1, 1)
    assert config.tuning_enabled
    assert config.tuning_grid().shape == (5, 6)


def test_unknown_keys_are_rejected():
    with pytest.raises(InputValidationError, match="penalty_grid"):
        RunConfig.from_dict({"penalty_grid": [1.0]})


@pytest.mark.parametrize("values", [{"n_trees": "100"}, {"seed": True}, {"alpha": "0.1"}, {"penalties": 1.0},
                                    {"sim_sizes": [100, 2.5]}, {"fixed_forest": [1]}])
def test_type_errors(values):
    with pytest.raises(InputValidationError):
        RunConfig.from_dict(values)


def test_integers_are_accepted_for_floats():
    config = RunConfig.from_dict({"alpha": 0.2, "tol": 2, "penalties": [10, 1, 0]})
    assert config.tol == 2.0 and isinstance(config.tol, float)
    assert config.penalties == [10.0, 1.0, 0.0]


@pytest.mark.parametrize("values", [{"alpha": 1.0}, {"q": 0}, {"interval": "credible"}, {"bootstrap_reps": 1},
                                    {"sigma": 0.0}, {"sim_methods": ["gbm"]}, {"schema_version": 2},
                                    {"forest_grid": [{"depth": 3}]}, {"penalties": [0.0, 1.0]}, {"folds": 1}])
def test_invalid_values(values):
    with pytest.raises(InputValidationError):
        RunConfig.from_dict(values)


def test_overrides_skip_none():
    config = RunConfig().with_overrides(seed=4, q=None, n_anchors=10)
    assert (config.seed, config.q, config.n_anchors) == (4, 1, 10)


def test_overrides_are_validated():
    with pytest.raises(InputValidationError):
        RunConfig().with_overrides(threads=0)


def test_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 3, "fixed_penalty": 0.5, "fixed_forest": {"impurity_tol": 1.0}}))
    config = RunConfig.from_file(str(path))
    assert config.seed == 3
    assert not config.tuning_enabled
    params = config.fixed_forest_params()
    assert (params.impurity_tol, params.n_trees, params.seed) == (1.0, 100, 3)


@pytest.mark.parametrize("content", [None, "{not json", "[1, 2]"])
def test_unreadable_files(tmp_path, content):
    path = tmp_path / "run.json"
    if content is not None:
        path.write_text(content)
    with pytest.raises(InputValidationError):
        RunConfig.from_file(str(path))


def test_tuning_needs_both_fixed_values():
    assert RunConfig(fixed_penalty=1.0).tuning_enabled
    assert RunConfig(fixed_forest={"impurity_tol": 1.0}).tuning_enabled
    assert not RunConfig(fixed_penalty=1.0, fixed_forest={}).tuning_enabled


def test_tuning_grid_follows_the_config():
    grid = RunConfig(n_trees=30, seed=9, forest_grid=[{"impurity_tol": 5.0}], penalties=[2.0, 0.0],
                     tol=0.5, folds=3).tuning_grid()
    assert grid.shape == (1, 2)
    assert grid.forest_params[0].n_trees == 30 and grid.forest_params[0].seed == 9
    assert (grid.tol, grid.folds) == (0.5, 3)


def test_simulation_settings():
    settings = RunConfig(sim_sizes=[50], sim_reps=3, threads=2).simulation_settings()
    assert (settings.sample_sizes, settings.reps, settings.n_jobs) == ((50,), 3, 2)
    assert RunConfig(sim_full=True).simulation_settings().reps == 50


def test_simulation_tunes_at_the_noise_level_by_default():
    settings = RunConfig().simulation_settings()
    assert settings.tune
    assert settings.rmse_level == settings.noise_sd == 0.1
    fast = RunConfig(sim_tune=False, sim_rmse_level=0.2).simulation_settings()
    assert not fast.tune and fast.rmse_level == 0.2


def test_rmse_level_must_be_positive():
    with pytest.raises(InputValidationError):
        RunConfig.from_dict({"sim_rmse_level": 0.0})
