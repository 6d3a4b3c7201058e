"""
Run configuration: JSON file plus command-line overrides.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

from src.core.forest import ForestParams
from src.core.simlab import METHODS, SimulationSettings
from src.core.tuning import DEFAULT_IMPURITY_TOLS, DEFAULT_PENALTIES, PINBALL, SQUARED, TuningGrid
from src.utils.numeric import check_level, fail

SCHEMA_VERSION = 1
INTERVAL_KINDS = ("prediction", "confidence")
ANCHOR_METRICS = ("euclidean", "scaled")
FULL_SIM_REPS = 50


def _default_forest_grid() -> List[dict]:
    return [{"impurity_tol": tol} for tol in DEFAULT_IMPURITY_TOLS]


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a command-line run."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    threads: int = 1
    q: int = 1
    alpha: float = 0.1
    n_trees: int = 100
    min_samples_leaf: int = 5
    penalties: List[float] = field(default_factory=lambda: list(DEFAULT_PENALTIES))
    forest_grid: List[dict] = field(default_factory=_default_forest_grid)
    fixed_penalty: Optional[float] = None
    fixed_forest: Optional[dict] = None
    tol: float = 1.0
    folds: int = 5
    loss: str = SQUARED
    quantile_level: float = 0.5
    n_anchors: Optional[int] = None
    anchor_metric: str = "euclidean"
    bootstrap_reps: int = 500
    interval: str = "prediction"
    sigma: Optional[float] = None
    sim_sizes: List[int] = field(default_factory=lambda: [100, 400, 1600])
    sim_dims: List[int] = field(default_factory=lambda: [2])
    sim_methods: List[str] = field(default_factory=lambda: ["rf"])
    sim_reps: int = 20
    sim_full: bool = False
    sim_n_eval: int = 200
    sim_trees: int = 50
    sim_tune: bool = True
    sim_rmse_level: Optional[float] = None

    @property
    def tuning_enabled(self) -> bool:
        """Tuning runs unless both the penalty and the forest are fixed."""
        return self.fixed_penalty is None or self.fixed_forest is None

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            fail(f"unsupported config schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        for name in ("threads", "q", "n_trees", "min_samples_leaf", "sim_reps", "sim_n_eval", "sim_trees"):
            if getattr(self, name) < 1:
                fail(f"{name} must be positive, got {getattr(self, name)}")
        check_level("alpha", self.alpha)
        check_level("quantile_level", self.quantile_level)
        if self.loss not in (SQUARED, PINBALL):
            fail(f"loss must be one of {SQUARED}, {PINBALL}, got '{self.loss}'")
        if self.interval not in INTERVAL_KINDS:
            fail(f"interval must be one of {INTERVAL_KINDS}, got '{self.interval}'")
        if self.anchor_metric not in ANCHOR_METRICS:
            fail(f"anchor_metric must be one of {ANCHOR_METRICS}, got '{self.anchor_metric}'")
        if self.bootstrap_reps < 2:
            fail(f"bootstrap_reps must be at least 2, got {self.bootstrap_reps}")
        if self.sigma is not None and not self.sigma > 0:
            fail(f"sigma must be positive, got {self.sigma}")
        if self.sim_rmse_level is not None and not self.sim_rmse_level > 0:
            fail(f"sim_rmse_level must be positive, got {self.sim_rmse_level}")
        if any(method not in METHODS for method in self.sim_methods):
            fail(f"sim_methods must be a subset of {METHODS}, got {self.sim_methods}")
        for overrides in self.forest_grid + ([self.fixed_forest] if self.fixed_forest is not None else []):
            self._check_forest_overrides(overrides)
        # Building the grid checks penalties, tol and folds
        self.tuning_grid()
        return self

    @staticmethod
    def _check_forest_overrides(overrides):
        if not isinstance(overrides, dict):
            fail(f"forest settings must be objects, got {overrides!r}")
        known = {f.name for f in fields(ForestParams)} - {"seed"}
        unknown = sorted(set(overrides) - known)
        if unknown:
            fail(f"unknown forest settings {unknown}")

    def base_forest(self) -> ForestParams:
        """Forest parameters shared by every forest of the run."""
        return ForestParams(n_trees=self.n_trees, min_samples_leaf=self.min_samples_leaf, seed=self.seed)

    def fixed_forest_params(self) -> ForestParams:
        return self.base_forest().replace(**(self.fixed_forest or {})).validate()

    def tuning_grid(self) -> TuningGrid:
        base = self.base_forest()
        return TuningGrid(
            forest_params=tuple(base.replace(**overrides).validate() for overrides in self.forest_grid),
            penalties=tuple(self.penalties),
            tol=self.tol,
            folds=self.folds,
            loss=self.loss,
            quantile_level=self.quantile_level,
        )

    def simulation_settings(self) -> SimulationSettings:
        return SimulationSettings(
            sample_sizes=tuple(self.sim_sizes),
            dims=tuple(self.sim_dims),
            methods=tuple(self.sim_methods),
            reps=FULL_SIM_REPS if self.sim_full else self.sim_reps,
            seed=self.seed,
            n_eval=self.sim_n_eval,
            pilot_trees=self.sim_trees,
            forest_trees=self.sim_trees,
            tune=self.sim_tune,
            rmse_level=self.sim_rmse_level,
            folds=self.folds,
            n_jobs=self.threads,
        )

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with every override that is not None applied and checked."""
        changes = {name: value for name, value in overrides.items() if value is not None}
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        """
        Build a validated configuration.

        Args:
            values (dict): Field values; missing fields take their defaults

        Returns:
            RunConfig: The configuration
        """
        if not isinstance(values, dict):
            fail("configuration must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            fail(f"unknown configuration keys: {', '.join(unknown)}")
        defaults = cls()
        checked = {name: _check_type(name, value, getattr(defaults, name)) for name, value in values.items()}
        return replace(defaults, **checked).validate()

    @classmethod
    def from_file(cls, file_path: str) -> "RunConfig":
        try:
            with open(file_path, "r", encoding="utf-8") as file:
                values = json.load(file)
        except OSError as exc:
            fail(f"cannot read config file {file_path}: {exc}")
        except json.JSONDecodeError as exc:
            fail(f"config file {file_path} is not valid JSON: {exc}")
        return cls.from_dict(values)


_OPTIONAL = {"fixed_penalty": float, "fixed_forest": dict, "n_anchors": int, "sigma": float, "sim_rmse_level": float}
_LIST_ITEMS = {"penalties": float, "forest_grid": dict, "sim_sizes": int, "sim_dims": int, "sim_methods": str}


def _scalar(name: str, value, expected: type):
    if expected is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if expected in (bool, str, dict) and isinstance(value, expected):
        return value
    fail(f"config key '{name}' expects {expected.__name__}, got {type(value).__name__}")


def _check_type(name: str, value, default):
    """Type-check one configuration value against its field."""
    if name in _OPTIONAL:
        return None if value is None else _scalar(name, value, _OPTIONAL[name])
    if name in _LIST_ITEMS:
        if not isinstance(value, (list, tuple)):
            fail(f"config key '{name}' expects a list, got {type(value).__name__}")
        return [_scalar(name, item, _LIST_ITEMS[name]) for item in value]
    return _scalar(name, value, type(default))
