"""CSV ingestion into Dataset objects."""

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from config.settings import IOConfig
from core.model import Dataset
from utils.errors import DataError
from utils.logger import log

INTERCEPT_NAME = "intercept"


def read_frame(path: Path) -> pd.DataFrame:
    """Read a comma-separated UTF-8 file with a header row, keeping every cell as text."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def numeric_columns(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    """
    Convert the named columns to floats.

    Raises:
        DataError naming the column when it is missing, or the 1-based data row
        and column of the first blank or non-numeric cell
    """
    out = np.empty((len(frame), len(columns)))
    for k, name in enumerate(columns):
        if name not in frame.columns:
            raise DataError(f"column '{name}' not found", column=name)
        cells = frame[name].str.strip()
        blank = cells == ""
        if blank.any():
            row = int(np.argmax(blank.to_numpy())) + 1
            raise DataError(f"missing value in row {row}, column '{name}'", row=row, column=name)
        values = pd.to_numeric(cells, errors="coerce").to_numpy(dtype=float, na_value=np.nan)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.argmax(bad)) + 1
            raise DataError(
                f"non-numeric value '{cells.iloc[row - 1]}' in row {row}, column '{name}'", row=row, column=name
            )
        out[:, k] = values
    return out


def _x_matrix(frame: pd.DataFrame, x_cols: Sequence[str], add_intercept: bool) -> tuple[np.ndarray, tuple]:
    x = numeric_columns(frame, x_cols)
    names = tuple(x_cols)
    if add_intercept:
        x = np.column_stack([np.ones(len(frame)), x])
        names = (INTERCEPT_NAME,) + names
    return x, names


def load_dataset(
    path: Path,
    response: str = "y",
    x_cols: Sequence[str] = (),
    z_cols: Sequence[str] = (),
    add_intercept: bool = True,
    standardize_z: bool = False,
) -> Dataset:
    """
    Load a Dataset from CSV.

    Args:
        path: CSV file with a header row
        response: Response column
        x_cols: Interaction covariates; without add_intercept the first must be all ones
        z_cols: Index covariates
        add_intercept: Prepend a column of ones to X
        standardize_z: Center and scale Z to mean 0 and variance 1

    Returns:
        Dataset with standardization metadata when requested
    """
    if not z_cols:
        raise DataError("at least one index covariate column is required")
    if not x_cols and not add_intercept:
        raise DataError("X needs at least one column; enable add_intercept or name x columns")
    frame = read_frame(path)
    if frame.empty:
        raise DataError(f"{path} has no data rows")

    y = numeric_columns(frame, [response])[:, 0]
    x, x_names = _x_matrix(frame, x_cols, add_intercept)
    z = numeric_columns(frame, z_cols)

    center = scale = None
    if standardize_z:
        center = z.mean(axis=0)
        scale = z.std(axis=0)
        flat = np.flatnonzero(scale == 0)
        if flat.size:
            raise DataError(f"column '{z_cols[flat[0]]}' is constant and cannot be standardized", column=z_cols[flat[0]])
        z = (z - center) / scale

    dataset = Dataset(y=y, x=x, z=z, x_names=x_names, z_names=tuple(z_cols), z_center=center, z_scale=scale)
    log.info(f"Loaded {path}: n={dataset.n}, d={dataset.d}, p={dataset.p}")
    return dataset


def load_from_config(io: IOConfig) -> Dataset:
    """Dataset described by an [io] section."""
    return load_dataset(io.data, io.response, io.x_cols, io.z_cols, io.add_intercept, io.standardize_z)


def load_covariates(
    path: Path,
    x_cols: Sequence[str],
    z_cols: Sequence[str],
    add_intercept: bool = True,
    z_center: Optional[np.ndarray] = None,
    z_scale: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """X and Z for prediction, standardized with stored training statistics."""
    frame = read_frame(path)
    if frame.empty:
        raise DataError(f"{path} has no data rows")
    x, _ = _x_matrix(frame, x_cols, add_intercept)
    z = numeric_columns(frame, z_cols)
    if z_center is not None and z_scale is not None:
        z = (z - np.asarray(z_center)) / np.asarray(z_scale)
    return x, z
