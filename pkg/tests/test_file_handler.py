import numpy as np
import pandas as pd
import pytest

from src.core.exceptions import InputValidationError
from src.core.forest import ForestParams, fit_regression_forest
from src.utils.file_handler import FileHandler


@pytest.fixture
def handler():
    return FileHandler()


class TestReadTraining:

    def test_columns(self, handler, write_csv):
        path = write_csv("train.csv", {"x1": [0.0, 1.0], "x2": [2.0, 3.0], "y": [0.5, -0.5]})
        X, y = handler.read_training_csv(path)
        np.testing.assert_array_equal(X, [[0.0, 2.0], [1.0, 3.0]])
        np.testing.assert_array_equal(y, [0.5, -0.5])

    def test_missing_response(self, handler, write_csv):
        path = write_csv("train.csv", {"x1": [0.0, 1.0]})
        with pytest.raises(InputValidationError, match="missing column 'y'"):
            handler.read_training_csv(path)

    def test_covariates_must_come_first(self, handler, write_csv):
        path = write_csv("train.csv", {"y": [0.0], "x1": [1.0]})
        with pytest.raises(InputValidationError, match="x1..xd"):
            handler.read_training_csv(path)

    def test_extra_columns(self, handler, write_csv):
        path = write_csv("train.csv", {"x1": [0.0], "y": [1.0], "weight": [2.0]})
        with pytest.raises(InputValidationError):
            handler.read_training_csv(path)

    def test_missing_values(self, handler, write_csv):
        path = write_csv("train.csv", {"x1": [0.0, np.nan], "y": [1.0, 2.0]})
        with pytest.raises(InputValidationError, match="non-finite"):
            handler.read_training_csv(path)

    def test_non_numeric_values(self, handler, write_csv):
        path = write_csv("train.csv", {"x1": ["a", "b"], "y": [1.0, 2.0]})
        with pytest.raises(InputValidationError, match="non-numeric"):
            handler.read_training_csv(path)

    def test_missing_file(self, handler, tmp_path):
        with pytest.raises(InputValidationError, match="not found"):
            handler.read_training_csv(str(tmp_path / "absent.csv"))

    def test_header_only(self, handler, tmp_path):
        path = tmp_path / "train.csv"
        path.write_text("x1,y\n")
        with pytest.raises(InputValidationError, match="no data rows"):
            handler.read_training_csv(str(path))


class TestReadPilotAndTargets:

    def test_pilot_columns(self, handler, write_csv):
        path = write_csv("pilot.csv", {"x1": [0.0, 1.0], "pilot": [1.0, 2.0], "pilot_qlo": [0.0, 1.0],
                                       "pilot_qhi": [2.0, 3.0]})
        np.testing.assert_array_equal(handler.read_pilot_csv(path).pilot, [1.0, 2.0])
        np.testing.assert_array_equal(handler.read_pilot_csv(path, column="pilot_qhi").pilot, [2.0, 3.0])

    def test_missing_pilot(self, handler, write_csv):
        path = write_csv("pilot.csv", {"x1": [0.0], "pilot_qlo": [1.0]})
        with pytest.raises(InputValidationError):
            handler.read_pilot_csv(path)

    def test_missing_quantile_column(self, handler, write_csv):
        path = write_csv("pilot.csv", {"x1": [0.0], "pilot": [1.0]})
        with pytest.raises(InputValidationError, match="pilot_qlo"):
            handler.read_pilot_csv(path, column="pilot_qlo")

    def test_targets(self, handler, write_csv):
        path = write_csv("targets.csv", {"x1": [0.5, 1.5], "x2": [2.0, 3.0]})
        np.testing.assert_array_equal(handler.read_targets_csv(path, d=2), [[0.5, 2.0], [1.5, 3.0]])

    def test_header_only_targets(self, handler, tmp_path):
        path = tmp_path / "targets.csv"
        path.write_text("x1,x2\n")
        assert handler.read_targets_csv(str(path), d=2).shape == (0, 2)

    def test_target_dimension(self, handler, write_csv):
        path = write_csv("targets.csv", {"x1": [0.5]})
        with pytest.raises(InputValidationError, match="expected 2"):
            handler.read_targets_csv(path, d=2)


class TestWrite:

    def test_floats_round_trip(self, handler, tmp_path):
        path = str(tmp_path / "out.csv")
        values = [0.1, 1 / 3, np.pi * 1e-17]
        handler.write_table(pd.DataFrame({"x1": values}), path)
        np.testing.assert_array_equal(pd.read_csv(path, float_precision="round_trip")["x1"], values)

    def test_json_is_sorted(self, handler, tmp_path):
        path = tmp_path / "out.json"
        handler.write_json({"b": 1, "a": [1.5]}, str(path))
        assert path.read_text().index('"a"') < path.read_text().index('"b"')


class TestForestFiles:

    def test_save_and_load(self, handler, tmp_path, rng):
        X = rng.uniform(size=(30, 2))
        y = X[:, 0] + rng.normal(size=30)
        forest = fit_regression_forest(X, y, ForestParams(n_trees=4, seed=6))
        path = str(tmp_path / "pilot.forest")
        handler.save_forest(forest, path)
        assert handler.is_valid_forest_file(path)
        restored = handler.load_forest(path)
        np.testing.assert_array_equal(restored.predict_mean(y, X), forest.predict_mean(y, X))

    def test_wrong_header(self, handler, tmp_path):
        path = tmp_path / "pilot.forest"
        path.write_text('{"forest": {}}\n')
        assert not handler.is_valid_forest_file(str(path))
        with pytest.raises(InputValidationError, match="not a forest file"):
            handler.load_forest(str(path))

    def test_corrupt_body(self, handler, tmp_path):
        path = tmp_path / "pilot.forest"
        path.write_text("#XTRAPOLATION-FOREST v1\n{\"format_version\": 1}\n")
        with pytest.raises(InputValidationError, match="corrupt"):
            handler.load_forest(str(path))

    def test_missing_forest_file(self, handler, tmp_path):
        assert not handler.is_valid_forest_file(str(tmp_path / "absent.forest"))
