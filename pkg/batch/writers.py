"""JSON and CSV artifacts of the batch commands."""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from core import model
from estimation.estimator import VicmFit
from estimation.inference import CovarianceReport, CurveBand
from splines.basis import IndexRescaler, SplineBasis
from utils.errors import DataError, ParameterError

COEFFS_HEADER = ["component", "index", "coefficient"]
CURVES_HEADER = ["component", "u", "m_hat", "se", "lo", "hi"]
SIMREPORT_HEADER = ["replication", "quantity", "component", "index", "value"]
TUNING_HEADER = ["delta", "bandwidth", "pe", "valid", "reason"]
PREDICTIONS_HEADER = ["row", "prediction"]
MSIC_HEADER = ["alpha", "loss", "df", "msic", "valid", "reason"]

FLOAT_FORMAT = "%.17g"


def _plain(obj):
    """Turn numpy containers into JSON values; NaN and infinities become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, payload: dict) -> Path:
    """Write sorted, indented JSON; repeated runs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_plain(payload), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable) -> Path:
    """Write rows under a pinned header with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=list(header))
    frame = frame[list(header)]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def coeff_rows(fit: VicmFit) -> list[tuple]:
    return [(l + 1, j + 1, float(v)) for (l, j), v in np.ndenumerate(fit.coeffs)]


def curve_rows(bands: Sequence[CurveBand]) -> list[tuple]:
    return [row for band in bands for row in band.rows()]


def fit_to_dict(
    fit: VicmFit,
    cov: Optional[CovarianceReport] = None,
    x_names: Sequence[str] = (),
    z_names: Sequence[str] = (),
    add_intercept: bool = True,
    z_center: Optional[np.ndarray] = None,
    z_scale: Optional[np.ndarray] = None,
) -> dict:
    """Everything fit.json holds, enough to rebuild predictions."""
    payload = {
        "tau": fit.tau,
        "bandwidth": fit.bandwidth,
        "n": fit.n,
        "d": fit.d,
        "p": fit.p,
        "loadings": fit.loadings,
        "coeffs": fit.coeffs,
        "basis": fit.basis.to_dict(),
        "rescalers": [r.to_dict() for r in fit.rescalers],
        "objective": fit.objective,
        "converged": fit.converged,
        "stop_reason": fit.stop_reason,
        "iterations": fit.iterations,
        "trace": [t.to_dict() for t in fit.trace],
        "x_names": list(x_names),
        "z_names": list(z_names),
        "add_intercept": add_intercept,
        "support": fit.support,
        "alpha1": fit.alpha1,
    }
    if cov is not None:
        payload["asd"] = cov.asd_full.reshape(fit.d, fit.p)
        payload["penalized_covariance"] = cov.penalized
    if z_scale is not None:
        payload["z_center"] = z_center
        payload["z_scale"] = z_scale
        payload["loadings_raw_z"] = model.destandardize_loadings(fit.loadings, z_scale)
    return payload


@dataclass(frozen=True)
class SavedModel:
    """Fitted model reloaded from fit.json."""
    loadings: np.ndarray
    coeffs: np.ndarray
    basis: SplineBasis
    rescalers: tuple
    tau: float
    x_names: tuple
    z_names: tuple
    add_intercept: bool
    z_center: Optional[np.ndarray] = None
    z_scale: Optional[np.ndarray] = None

    @property
    def x_cols(self) -> list[str]:
        """Data columns of X, without the added intercept."""
        return list(self.x_names[1:] if self.add_intercept else self.x_names)

    def predict(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.loadings.shape[0] or z.shape[1] != self.loadings.shape[1]:
            raise DataError(f"prediction data has shapes x{x.shape}, z{z.shape} that do not match the model")
        return model.predict(self.loadings, self.coeffs, self.basis, self.rescalers, x, z)


def load_fit_json(path: Path) -> SavedModel:
    """Rebuild the prediction model from a fit.json file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return SavedModel(
            loadings=np.asarray(data["loadings"], dtype=float),
            coeffs=np.asarray(data["coeffs"], dtype=float),
            basis=SplineBasis.from_dict(data["basis"]),
            rescalers=tuple(IndexRescaler(**r) for r in data["rescalers"]),
            tau=float(data["tau"]),
            x_names=tuple(data["x_names"]),
            z_names=tuple(data["z_names"]),
            add_intercept=bool(data["add_intercept"]),
            z_center=None if data.get("z_center") is None else np.asarray(data["z_center"], dtype=float),
            z_scale=None if data.get("z_scale") is None else np.asarray(data["z_scale"], dtype=float),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ParameterError) as e:
        raise DataError(f"cannot read model file {path}: {e}") from e
