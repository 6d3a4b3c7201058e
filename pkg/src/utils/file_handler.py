"""
File handling utilities: CSV interchange and forest files.
"""
import json
import os
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.core.bounds import SampleSet
from src.core.forest import Forest
from src.utils.numeric import fail

FOREST_MAGIC = "#XTRAPOLATION-FOREST"
FOREST_FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"


class FileHandler:
    """Reads and writes the CSV, JSON and forest files of a run."""

    @staticmethod
    def _read_csv(file_path: str, allow_empty: bool = False) -> Optional[pd.DataFrame]:
        if not os.path.exists(file_path):
            fail(f"file not found: {file_path}")
        try:
            return pd.read_csv(file_path, float_precision="round_trip")
        except pd.errors.EmptyDataError:
            if allow_empty:
                return None
            fail(f"{file_path} is empty")
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            fail(f"{file_path} is not a readable CSV file: {exc}")

    @staticmethod
    def covariate_columns(frame: pd.DataFrame, file_path: str) -> List[str]:
        """
        Leading x1..xd columns of a table.

        Args:
            frame (pd.DataFrame): Table read from file_path
            file_path (str): Path used in error messages

        Returns:
            List[str]: The covariate column names, in order
        """
        columns = []
        for name in frame.columns:
            if name != f"x{len(columns) + 1}":
                break
            columns.append(name)
        if not columns:
            fail(f"{file_path} must start with covariate columns x1..xd, got {list(frame.columns)}")
        return columns

    @staticmethod
    def _numeric(frame: pd.DataFrame, columns: List[str], file_path: str) -> np.ndarray:
        try:
            values = frame[columns].to_numpy(dtype=np.float64)
        except (TypeError, ValueError):
            fail(f"{file_path} contains non-numeric values in columns {columns}")
        if not np.all(np.isfinite(values)):
            fail(f"{file_path} contains missing or non-finite values in columns {columns}")
        return values

    @staticmethod
    def _require(frame: pd.DataFrame, expected: List[str], file_path: str):
        missing = [name for name in expected if name not in frame.columns]
        if missing:
            fail(f"{file_path} is missing column{'s' if len(missing) > 1 else ''} "
                 f"{', '.join(repr(name) for name in missing)}")
        if list(frame.columns) != expected:
            fail(f"{file_path} has columns {list(frame.columns)}, expected {expected}")

    @staticmethod
    def read_training_csv(file_path: str) -> Tuple[np.ndarray, np.ndarray]:
        """
        Read a training table with header x1..xd,y.

        Args:
            file_path (str): Path to the CSV file

        Returns:
            Tuple[np.ndarray, np.ndarray]: (n, d) covariates and length-n responses
        """
        frame = FileHandler._read_csv(file_path)
        covariates = FileHandler.covariate_columns(frame, file_path)
        FileHandler._require(frame, covariates + ["y"], file_path)
        if len(frame) == 0:
            fail(f"{file_path} has no data rows")
        logger.debug(f"read {len(frame)} training rows with {len(covariates)} covariates from {file_path}")
        return FileHandler._numeric(frame, covariates, file_path), FileHandler._numeric(frame, ["y"], file_path)[:, 0]

    @staticmethod
    def read_pilot_csv(file_path: str, column: str = "pilot") -> SampleSet:
        """
        Read a pilot table x1..xd,pilot[,pilot_qlo,pilot_qhi].

        Args:
            file_path (str): Path to the CSV file
            column (str): Pilot column paired with the covariates

        Returns:
            SampleSet: Covariates and the selected pilot column
        """
        frame = FileHandler._read_csv(file_path)
        covariates = FileHandler.covariate_columns(frame, file_path)
        extra = [name for name in frame.columns if name not in covariates]
        allowed = ["pilot", "pilot_qlo", "pilot_qhi"]
        FileHandler._require(frame, covariates + [name for name in allowed if name in extra or name == "pilot"],
                             file_path)
        if column not in frame.columns:
            fail(f"{file_path} is missing column '{column}'")
        if len(frame) == 0:
            fail(f"{file_path} has no data rows")
        return SampleSet(FileHandler._numeric(frame, covariates, file_path),
                         FileHandler._numeric(frame, [column], file_path)[:, 0])

    @staticmethod
    def read_targets_csv(file_path: str, d: Optional[int] = None) -> np.ndarray:
        """
        Read target points x1..xd; a header-only file gives zero targets.

        Args:
            file_path (str): Path to the CSV file
            d (int, optional): Required dimension

        Returns:
            np.ndarray: (m, d) targets
        """
        frame = FileHandler._read_csv(file_path, allow_empty=d is not None)
        if frame is None:
            return np.empty((0, d))
        covariates = FileHandler.covariate_columns(frame, file_path)
        FileHandler._require(frame, covariates, file_path)
        if d is not None and len(covariates) != d:
            fail(f"{file_path} has {len(covariates)} covariates, expected {d}")
        return FileHandler._numeric(frame, covariates, file_path).reshape(len(frame), len(covariates))

    @staticmethod
    def write_table(frame: pd.DataFrame, file_path: str):
        """Write a table with round-trip float formatting."""
        frame.to_csv(file_path, index=False, float_format=FLOAT_FORMAT)
        logger.debug(f"wrote {len(frame)} rows to {file_path}")

    @staticmethod
    def write_json(data: dict, file_path: str):
        with open(file_path, "w", encoding="utf-8") as file:
            json.dump(data, file, indent=2, sort_keys=True)
            file.write("\n")

    @staticmethod
    def save_forest(forest: Forest, file_path: str):
        """
        Save a fitted forest: a magic header line followed by a JSON body.

        Args:
            forest (Forest): The forest
            file_path (str): Destination path
        """
        body = {"format_version": FOREST_FORMAT_VERSION, "forest": forest.to_dict()}
        with open(file_path, "w", encoding="utf-8") as file:
            file.write(f"{FOREST_MAGIC} v{FOREST_FORMAT_VERSION}\n")
            json.dump(body, file, separators=(",", ":"))
            file.write("\n")

    @staticmethod
    def is_valid_forest_file(file_path: str) -> bool:
        """
        Check whether a file starts with the forest header.

        Args:
            file_path (str): Path to the file to check

        Returns:
            bool: True if the header matches, False otherwise
        """
        if not os.path.exists(file_path):
            return False
        try:
            with open(file_path, "r", encoding="utf-8") as file:
                return file.readline().strip() == f"{FOREST_MAGIC} v{FOREST_FORMAT_VERSION}"
        except (OSError, UnicodeDecodeError):
            return False

    @staticmethod
    def load_forest(file_path: str) -> Forest:
        """Load a forest written by save_forest."""
        if not FileHandler.is_valid_forest_file(file_path):
            fail(f"{file_path} is not a forest file (format v{FOREST_FORMAT_VERSION})")
        try:
            with open(file_path, "r", encoding="utf-8") as file:
                file.readline()
                body = json.load(file)
            return Forest.from_dict(body["forest"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            fail(f"{file_path} has a corrupt forest body: {exc}")
