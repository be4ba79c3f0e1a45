"""
Run Artifact Storage
CSV and JSON file persistence for datasets, checkpoints, traces and metrics.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from envshift.config import dump_run_config, load_run_config, settings
from envshift.error_handler import DataFileError
from envshift.models.arhmm import Arhmm
from envshift.models.generation import Dataset
from envshift.models.run_config import RunConfig
from envshift.services.idea import IdeaModel, model_from_json_dict, model_to_json_dict
from envshift.services.trainer import Standardizer

logger = logging.getLogger(__name__)


class RunStore:
    """
    Reads and writes the artifacts of one directory.

    CSVs: header row, comma separated, Unix newlines, floats at
    `settings.float_digits` significant digits. JSON floats use the shortest
    repr that round-trips, so checkpoints reload bit-exactly.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        return self.directory / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def sub(self, name: str) -> "RunStore":
        return RunStore(self.directory / name)

    def _ensure_dir(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)

    def _missing(self, name: str) -> DataFileError:
        return DataFileError(f"Required file not found: {self.path(name)}", path=str(self.path(name)))

    # ------------------------------------------------------------------
    # JSON
    # ------------------------------------------------------------------

    def read_json(self, name: str, required: bool = True) -> Optional[dict[str, Any]]:
        """
        Load a JSON artifact.

        Returns None for a missing optional file.

        Raises:
            DataFileError: missing required file or invalid JSON
        """
        if not self.exists(name):
            if required:
                raise self._missing(name)
            return None
        try:
            with open(self.path(name), "r", encoding="utf-8") as f:
                return json.load(f)
        except (PermissionError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise DataFileError(f"Could not parse {self.path(name)}: {e}", path=str(self.path(name))) from e

    def write_json(self, name: str, data: dict[str, Any]) -> Path:
        self._ensure_dir()
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        return self.path(name)

    # ------------------------------------------------------------------
    # CSV
    # ------------------------------------------------------------------

    def read_csv(self, name: str, required: bool = True, header: bool = True) -> Optional[pd.DataFrame]:
        if not self.exists(name):
            if required:
                raise self._missing(name)
            return None
        try:
            return pd.read_csv(self.path(name), header=0 if header else None, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise DataFileError(f"Could not parse {self.path(name)}: {e}", path=str(self.path(name))) from e

    def write_csv(self, name: str, frame: pd.DataFrame, header: bool = True) -> Path:
        self._ensure_dir()
        frame.to_csv(
            self.path(name),
            index=False,
            header=header,
            float_format=settings.float_format,
            lineterminator="\n",
            encoding="utf-8",
        )
        return self.path(name)

    def read_matrix(self, name: str, required: bool = True, header: bool = True) -> Optional[np.ndarray]:
        """Numeric CSV as a float array (2-D); a leading `t` column is dropped"""
        frame = self.read_csv(name, required=required, header=header)
        if frame is None:
            return None
        if header:
            frame = frame.drop(columns=["t"], errors="ignore")
        try:
            return frame.to_numpy(dtype=np.float64)
        except ValueError as e:
            raise DataFileError(f"Non-numeric values in {self.path(name)}", path=str(self.path(name))) from e

    def write_matrix(self, name: str, values: np.ndarray, prefix: Optional[str] = None) -> Path:
        """Rows of a matrix; without a prefix the file has no header row"""
        values = np.atleast_2d(np.asarray(values))
        if prefix is None:
            return self.write_csv(name, pd.DataFrame(values), header=False)
        columns = [f"{prefix}{i}" for i in range(values.shape[1])]
        return self.write_csv(name, pd.DataFrame(values, columns=columns))

    def write_series(self, name: str, values: np.ndarray, prefix: str) -> Path:
        """One row per time step: t, {prefix}0, {prefix}1, ..."""
        values = np.asarray(values)
        if values.ndim == 1:
            frame = pd.DataFrame({prefix: values})
        else:
            frame = pd.DataFrame(values, columns=[f"{prefix}{i}" for i in range(values.shape[1])])
        frame.insert(0, "t", np.arange(len(frame)))
        return self.write_csv(name, frame)

    def read_labels(self, name: str, column: str = "e", required: bool = True) -> Optional[np.ndarray]:
        """Integer environment labels from a `t,e` file"""
        frame = self.read_csv(name, required=required)
        if frame is None:
            return None
        if column not in frame.columns:
            raise DataFileError(f"{self.path(name)} has no '{column}' column", path=str(self.path(name)))
        return frame[column].to_numpy(dtype=np.int64)

    # ------------------------------------------------------------------
    # Run config
    # ------------------------------------------------------------------

    def save_run_config(self, config: RunConfig) -> Path:
        self._ensure_dir()
        dump_run_config(config, self.path(settings.default_config_name))
        return self.path(settings.default_config_name)

    def load_run_config(self, seed: Optional[int] = None) -> RunConfig:
        return load_run_config(self.path(settings.default_config_name), seed=seed)

    # ------------------------------------------------------------------
    # Datasets
    # ------------------------------------------------------------------

    def save_dataset(self, dataset: Dataset) -> None:
        """observations.csv plus ground-truth latents_s/latents_e/envs when present"""
        self.write_series("observations.csv", dataset.x, "x")
        if dataset.z_s_true is not None:
            self.write_series("latents_s.csv", dataset.z_s_true, "zs")
        if dataset.z_e_true is not None:
            self.write_series("latents_e.csv", dataset.z_e_true, "ze")
        if dataset.e_true is not None:
            self.write_series("envs.csv", np.asarray(dataset.e_true, dtype=np.int64), "e")

    def load_dataset(self, config: RunConfig, with_truth: bool = True) -> Dataset:
        x = self.read_matrix("observations.csv")
        truth = {}
        if with_truth:
            e_true = self.read_labels("envs.csv", required=False)
            truth = {
                "e_true": e_true,
                "z_s_true": self.read_matrix("latents_s.csv", required=False),
                "z_e_true": self.read_matrix("latents_e.csv", required=False),
            }
        try:
            return Dataset(
                x=x,
                window=config.gen.window,
                stride=config.gen.stride,
                t_split=config.gen.t_split,
                **truth,
            )
        except ValueError as e:
            raise DataFileError(f"Inconsistent dataset in {self.directory}: {e}", path=str(self.directory)) from e

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save_arhmm(self, model: Arhmm, name: str = "arhmm.json") -> Path:
        return self.write_json(name, model.to_json_dict())

    def load_arhmm(self, name: str = "arhmm.json") -> Arhmm:
        data = self.read_json(name)
        try:
            return Arhmm.from_json_dict(data)
        except (KeyError, ValueError) as e:
            raise DataFileError(f"Invalid HMM checkpoint {self.path(name)}: {e}", path=str(self.path(name))) from e

    def save_standardizer(self, standardizer: Standardizer) -> Path:
        return self.write_json("standardizer.json", standardizer.to_json_dict())

    def load_standardizer(self) -> Standardizer:
        data = self.read_json("standardizer.json")
        try:
            return Standardizer.from_json_dict(data)
        except (KeyError, ValueError) as e:
            raise DataFileError(f"Invalid standardizer {self.path('standardizer.json')}", path=str(self.path("standardizer.json"))) from e

    def save_idea(self, model: IdeaModel) -> Path:
        return self.write_json("idea_model.json", model_to_json_dict(model))

    def load_idea(self) -> IdeaModel:
        return model_from_json_dict(self.read_json("idea_model.json"))
