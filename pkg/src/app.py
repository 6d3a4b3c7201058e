"""
Command-line application controller for extrapolation-aware inference.
"""
import argparse
import sys
from typing import List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from src import __version__
from src.core.bounds import BoundTable, SampleSet
from src.core.exceptions import InputValidationError
from src.core.forest import Forest, fit_regression_forest, forest_fitter, predict_quantiles
from src.core.inference import (bootstrap_confidence_interval, cv_residual_std, extrapolation_score,
                                make_bounds_pipeline, prediction_interval)
from src.core.simlab import euclidean_scores, run_simulation
from src.core.tuning import tune
from src.core.xtrapolation import Xtrapolation
from src.utils.config import RunConfig
from src.utils.file_handler import FileHandler

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPUTE = 3


class XtrapolationApp:
    """Command-line application controller."""

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or RunConfig()
        self.file_handler = FileHandler()
        self.verbose = False

    # Setup
    def _build_parser(self) -> argparse.ArgumentParser:
        """Argument parser with one subcommand per pipeline stage."""
        parser = argparse.ArgumentParser(prog="xtrapolation",
                                         description="Extrapolation bounds, intervals and scores from pilot fits.")
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        parser.add_argument("--config", help="JSON run configuration")
        parser.add_argument("--seed", type=int, help="seed of every random choice (default 0)")
        parser.add_argument("--threads", type=int, help="parallel workers")
        verbosity = parser.add_mutually_exclusive_group()
        verbosity.add_argument("--verbose", action="store_true", help="debug logging and stack traces")
        verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")
        commands = parser.add_subparsers(dest="command", required=True)

        pilot = commands.add_parser("pilot", help="fit a regression forest pilot")
        pilot.add_argument("--train", required=True, help="CSV with x1..xd,y")
        pilot.add_argument("--out", required=True, help="output CSV x1..xd,pilot[,pilot_qlo,pilot_qhi]")
        pilot.add_argument("--forest-out", help="save the fitted forest")
        pilot.add_argument("--forest-in", help="reuse a saved forest instead of fitting")
        pilot.add_argument("--quantiles", action="store_true", help="add alpha/2 and 1-alpha/2 quantile columns")
        pilot.add_argument("--alpha", type=float)
        pilot.add_argument("--n-trees", type=int)

        bounds = commands.add_parser("bounds", help="extrapolation bounds from a pilot table")
        bounds.add_argument("--pilot", required=True, help="CSV with x1..xd,pilot")
        bounds.add_argument("--targets", required=True, help="CSV with x1..xd")
        bounds.add_argument("--out", required=True)
        bounds.add_argument("--column", default="pilot", help="pilot column to bound")
        self._add_pipeline_arguments(bounds)

        intervals = commands.add_parser("intervals", help="prediction or confidence intervals")
        intervals.add_argument("--train", required=True)
        intervals.add_argument("--targets", required=True)
        intervals.add_argument("--out", required=True)
        intervals.add_argument("--kind", choices=["prediction", "confidence"])
        intervals.add_argument("--alpha", type=float)
        intervals.add_argument("--bootstrap-reps", type=int)
        self._add_pipeline_arguments(intervals)

        score = commands.add_parser("score", help="extrapolation scores at targets")
        score.add_argument("--train", required=True)
        score.add_argument("--targets", required=True)
        score.add_argument("--out", required=True)
        score.add_argument("--sigma", type=float, help="residual scale; cross-validated if omitted")
        self._add_pipeline_arguments(score)

        tuning = commands.add_parser("tune", help="select forest and penalty per direction")
        tuning.add_argument("--pilot", required=True)
        tuning.add_argument("--out", required=True, help="output JSON")
        tuning.add_argument("--column", default="pilot")
        tuning.add_argument("--q", type=int)

        simulate = commands.add_parser("simulate", help="run the simulation study")
        simulate.add_argument("--out", required=True, help="metrics CSV")
        simulate.add_argument("--curves-out", help="cumulative RMSE curves CSV")
        simulate.add_argument("--reps", type=int)
        simulate.add_argument("--full", action="store_true", help="50 replicates")
        simulate.add_argument("--no-tune", action="store_true", help="fixed forest and penalty, skips tuning")
        simulate.add_argument("--sizes", type=int, nargs="+")
        simulate.add_argument("--dims", type=int, nargs="+")
        simulate.add_argument("--methods", nargs="+", choices=["rf", "ols"])
        return parser

    @staticmethod
    def _add_pipeline_arguments(parser: argparse.ArgumentParser):
        parser.add_argument("--q", type=int, help="derivative order (q > 1 needs d = 1)")
        parser.add_argument("--penalty", type=float, help="fixed penalty")
        parser.add_argument("--impurity-tol", type=float, help="fixed forest impurity_tol")
        parser.add_argument("--n-anchors", type=int, help="closest anchors kept per target")
        parser.add_argument("--anchor-metric", choices=["euclidean", "scaled"])

    def _setup_logging(self, args: argparse.Namespace):
        """Configure the loguru sink once per run."""
        level = "DEBUG" if args.verbose else "WARNING" if args.quiet else "INFO"
        logger.remove()
        logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <8} | {message}")

    def _load_config(self, args: argparse.Namespace) -> RunConfig:
        """File values first, then flags."""
        config = RunConfig.from_file(args.config) if args.config else self.config
        overrides = {
            "seed": args.seed,
            "threads": args.threads,
            "q": getattr(args, "q", None),
            "alpha": getattr(args, "alpha", None),
            "n_trees": getattr(args, "n_trees", None),
            "fixed_penalty": getattr(args, "penalty", None),
            "n_anchors": getattr(args, "n_anchors", None),
            "anchor_metric": getattr(args, "anchor_metric", None),
            "interval": getattr(args, "kind", None),
            "bootstrap_reps": getattr(args, "bootstrap_reps", None),
            "sigma": getattr(args, "sigma", None),
            "sim_reps": getattr(args, "reps", None),
            "sim_sizes": getattr(args, "sizes", None),
            "sim_dims": getattr(args, "dims", None),
            "sim_methods": getattr(args, "methods", None),
        }
        if getattr(args, "impurity_tol", None) is not None:
            overrides["fixed_forest"] = {**(config.fixed_forest or {}), "impurity_tol": args.impurity_tol}
        if getattr(args, "full", False):
            overrides["sim_full"] = True
        if getattr(args, "no_tune", False):
            overrides["sim_tune"] = False
        return config.with_overrides(**overrides)

    # Commands
    def _pipeline(self) -> Xtrapolation:
        config = self.config
        if config.tuning_enabled:
            grid, penalty, params = config.tuning_grid(), 0.0, None
        else:
            grid, penalty, params = None, config.fixed_penalty, config.fixed_forest_params()
        return Xtrapolation(q=config.q, penalty=penalty, forest_params=params, grid=grid,
                            n_anchors=config.n_anchors, anchor_metric=config.anchor_metric,
                            seed=config.seed, n_jobs=config.threads)

    def _bounds(self, samples: SampleSet, targets: np.ndarray) -> BoundTable:
        if targets.shape[0] == 0:
            return BoundTable(targets, np.empty(0), np.empty(0))
        return self._pipeline().fit(samples).predict_bounds(targets)

    def _pilot_forest(self, covariates: np.ndarray, responses: np.ndarray) -> Forest:
        return fit_regression_forest(covariates, responses, self.config.base_forest(), n_jobs=self.config.threads)

    def cmd_pilot(self, args: argparse.Namespace):
        """Fit (or reload) the pilot forest and write pilot predictions."""
        X, y = self.file_handler.read_training_csv(args.train)
        if args.forest_in:
            forest = self.file_handler.load_forest(args.forest_in)
            if forest.n_samples != X.shape[0] or forest.n_features != X.shape[1]:
                raise InputValidationError(f"forest in {args.forest_in} was fitted on different data")
        else:
            forest = self._pilot_forest(X, y)
        frame = pd.DataFrame(X, columns=[f"x{j + 1}" for j in range(X.shape[1])])
        frame["pilot"] = forest.predict_mean(y, X)
        if args.quantiles:
            alpha = self.config.alpha
            frame["pilot_qlo"] = predict_quantiles(forest, y, X, alpha / 2.0)
            frame["pilot_qhi"] = predict_quantiles(forest, y, X, 1.0 - alpha / 2.0)
        self.file_handler.write_table(frame, args.out)
        if args.forest_out:
            self.file_handler.save_forest(forest, args.forest_out)
        logger.info(f"pilot written to {args.out}")

    def cmd_bounds(self, args: argparse.Namespace):
        """Bounds at the targets from a pilot table."""
        samples = self.file_handler.read_pilot_csv(args.pilot, column=args.column)
        targets = self.file_handler.read_targets_csv(args.targets, d=samples.d)
        table = self._bounds(samples, targets)
        self.file_handler.write_table(table.to_frame(), args.out)
        logger.info(f"bounds at {table.m} targets written to {args.out}")

    def cmd_intervals(self, args: argparse.Namespace):
        """Extrapolation-aware prediction or confidence intervals."""
        config = self.config
        X, y = self.file_handler.read_training_csv(args.train)
        targets = self.file_handler.read_targets_csv(args.targets, d=X.shape[1])
        if config.interval == "prediction":
            forest = self._pilot_forest(X, y)
            lower = self._bounds(SampleSet(X, predict_quantiles(forest, y, X, config.alpha / 2.0)), targets)
            upper = self._bounds(SampleSet(X, predict_quantiles(forest, y, X, 1.0 - config.alpha / 2.0)), targets)
            frame = prediction_interval(lower, upper, config.alpha).to_frame()
        else:
            selected = None
            if config.tuning_enabled:
                # Tune once on the full-sample pilot; replicates reuse the choice
                forest = self._pilot_forest(X, y)
                tuned = self._pipeline().fit(SampleSet(X, forest.predict_mean(y, X)))
                selected = tuned.selections
                logger.info(f"bootstrap reuses the tuned selection {[(p.impurity_tol, lam) for p, lam in selected]}")
            pipeline = make_bounds_pipeline(q=config.q, pilot_params=config.base_forest(),
                                            penalty=config.fixed_penalty or 0.0,
                                            forest_params=config.fixed_forest_params(), seed=config.seed,
                                            selected=selected)
            rows = [bootstrap_confidence_interval(X, y, pipeline, target, config.alpha, B=config.bootstrap_reps,
                                                  seed=config.seed, n_jobs=config.threads)
                    for target in targets]
            frame = pd.DataFrame(targets, columns=[f"x{j + 1}" for j in range(X.shape[1])])
            frame["lo"] = [row.lo for row in rows]
            frame["hi"] = [row.hi for row in rows]
            frame["n_dropped"] = [row.n_dropped for row in rows]
        self.file_handler.write_table(frame, args.out)
        logger.info(f"{config.interval} intervals written to {args.out}")

    def cmd_score(self, args: argparse.Namespace):
        """Extrapolation scores and the nearest-sample distance at the targets."""
        config = self.config
        X, y = self.file_handler.read_training_csv(args.train)
        targets = self.file_handler.read_targets_csv(args.targets, d=X.shape[1])
        sigma = config.sigma
        if sigma is None:
            fitter = forest_fitter(config.base_forest(), n_jobs=config.threads)
            sigma = cv_residual_std(X, y, fitter, config.folds, config.seed)
            logger.info(f"cross-validated residual scale {sigma:.6g}")
            if sigma <= 0:
                raise InputValidationError("cross-validated residual scale is zero, pass --sigma explicitly")
        forest = self._pilot_forest(X, y)
        table = self._bounds(SampleSet(X, forest.predict_mean(y, X)), targets)
        frame = table.to_frame()[[f"x{j + 1}" for j in range(X.shape[1])] + ["lower", "upper", "width"]]
        frame["score"] = extrapolation_score(table, sigma).score
        frame["euclidean"] = euclidean_scores(X, targets)
        self.file_handler.write_table(frame, args.out)

    def cmd_tune(self, args: argparse.Namespace):
        """Tuning selection for every coordinate direction."""
        config = self.config
        samples = self.file_handler.read_pilot_csv(args.pilot, column=args.column)
        grid = config.tuning_grid()
        directions = []
        for j in range(samples.d):
            result = tune(samples, np.eye(samples.d)[j], grid, q=config.q, seed=config.seed, n_jobs=config.threads)
            params = result.forest_params.to_dict()
            params.pop("seed")
            directions.append({
                "direction": j,
                "forest_params": params,
                "penalty": result.penalty,
                "index": list(result.index),
                "mean_losses": result.mean_losses.tolist(),
            })
        self.file_handler.write_json({"seed": config.seed, "q": config.q, "directions": directions}, args.out)

    def cmd_simulate(self, args: argparse.Namespace):
        """Simulation study metrics and optional curves."""
        metrics, curves = run_simulation(self.config.simulation_settings())
        self.file_handler.write_table(metrics, args.out)
        if args.curves_out:
            self.file_handler.write_table(curves, args.curves_out)
        logger.info(f"{len(metrics)} simulation rows written to {args.out}")

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        Run one command.

        Args:
            argv (List[str], optional): Arguments without the program name

        Returns:
            int: 0 on success, 2 on invalid input, 3 on computation failure
        """
        args = self._build_parser().parse_args(argv)
        self.verbose = args.verbose
        self._setup_logging(args)
        handlers = {
            "pilot": self.cmd_pilot,
            "bounds": self.cmd_bounds,
            "intervals": self.cmd_intervals,
            "score": self.cmd_score,
            "tune": self.cmd_tune,
            "simulate": self.cmd_simulate,
        }
        try:
            self.config = self._load_config(args)
            handlers[args.command](args)
        except InputValidationError as exc:
            self._report(exc)
            return EXIT_INPUT
        except Exception as exc:  # noqa: BLE001
            self._report(exc)
            return EXIT_COMPUTE
        return EXIT_OK

    def _report(self, exc: Exception):
        if self.verbose:
            logger.exception(exc)
        else:
            logger.error(f"{type(exc).__name__}: {exc}")


def main(argv: Optional[List[str]] = None):
    """Main entry point."""
    app = XtrapolationApp()
    sys.exit(app.run(argv))


if __name__ == "__main__":
    main()
