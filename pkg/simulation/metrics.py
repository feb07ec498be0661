"""
Monte Carlo metrics.

Replications are stored as long rows (replication, quantity, component, index,
value); every aggregate is recomputed from those rows and the truth.
"""

from typing import Iterable, Literal, Optional

import numpy as np
import pandas as pd

from simulation.designs import Truth
from utils.errors import ParameterError

ROW_COLUMNS = ["replication", "quantity", "component", "index", "value"]
SUMMARY_COLUMNS = ["quantity", "component", "index", "value"]

MetricKind = Literal["loadings", "curves", "selection", "structure", "bands"]
METRIC_KINDS = ("loadings", "curves", "selection", "structure", "bands")

# Normal quantile of the pointwise bands
Z_975 = 1.959963984540054


def matrix_rows(replication: int, quantity: str, values) -> list[dict]:
    """Long rows of a d x k matrix with 1-based (component, index)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return [
        {"replication": replication, "quantity": quantity, "component": l + 1, "index": j + 1, "value": float(v)}
        for (l, j), v in np.ndenumerate(values)
    ]


def vector_rows(replication: int, quantity: str, values) -> list[dict]:
    """Long rows of a per-component vector (index 0)."""
    return [
        {"replication": replication, "quantity": quantity, "component": l + 1, "index": 0, "value": float(v)}
        for l, v in enumerate(np.ravel(values))
    ]


def scalar_row(replication: int, quantity: str, value: float) -> dict:
    return {"replication": replication, "quantity": quantity, "component": 0, "index": 0, "value": float(value)}


def rase(m_hat, m_true) -> float:
    """Root average squared error sqrt(mean((m-hat - m)^2))."""
    diff = np.asarray(m_hat, dtype=float) - np.asarray(m_true, dtype=float)
    return float(np.sqrt(np.mean(diff ** 2)))


def selection_counts(estimate: np.ndarray, true_support: np.ndarray) -> tuple[int, int, bool]:
    """
    Zero-pattern counts over the penalized loadings (columns 2..p).

    Returns:
        (C: true zeros estimated as zero, IC: true nonzeros estimated as zero, CF: exact support)
    """
    est_zero = np.asarray(estimate)[:, 1:] == 0
    true_zero = ~np.asarray(true_support, dtype=bool)[:, 1:]
    correct = int(np.sum(est_zero & true_zero))
    incorrect = int(np.sum(est_zero & ~true_zero))
    return correct, incorrect, bool(correct == true_zero.sum() and incorrect == 0)


def _stack(rows: pd.DataFrame, quantity: str) -> Optional[np.ndarray]:
    """R x d x k array of one stored quantity, ordered by replication."""
    part = rows[rows["quantity"] == quantity]
    if part.empty:
        return None
    reps = np.sort(part["replication"].unique())
    d, k = int(part["component"].max()), max(int(part["index"].max()), 1)
    out = np.full((reps.size, d, k), np.nan)
    pos = {r: i for i, r in enumerate(reps)}
    for rep, l, j, v in part[["replication", "component", "index", "value"]].itertuples(index=False):
        out[pos[rep], int(l) - 1, max(int(j), 1) - 1] = v
    return out


def _sd(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sample standard deviation with divisor R - 1; NaN for a single replication."""
    if values.shape[axis] < 2:
        return np.full(np.delete(values.shape, axis), np.nan)
    return np.std(values, axis=axis, ddof=1)


def _summary(quantity: str, values, per_index: bool = True) -> list[dict]:
    values = np.atleast_2d(values)
    out = []
    for (l, j), v in np.ndenumerate(values):
        out.append({"quantity": quantity, "component": l + 1, "index": j + 1 if per_index else 0, "value": float(v)})
    return out


def _loading_metrics(rows: pd.DataFrame, truth: Truth) -> list[dict]:
    out = []
    beta = _stack(rows, "beta")
    if beta is None:
        return out
    err = beta - truth.loadings[None]
    out += _summary("bias", err.mean(axis=0))
    out += _summary("mad", np.abs(err).mean(axis=0))
    out += _summary("esd", _sd(beta))
    asd = _stack(rows, "asd")
    if asd is not None:
        out += _summary("asd", asd.mean(axis=0))
    return out


def _curve_metrics(rows: pd.DataFrame, truth: Truth) -> list[dict]:
    out = []
    # With an unpenalized fit alongside, "rase" belongs to the penalized one
    penalized = (rows["quantity"] == "rase_u").any()
    for stored, name in (("rase", "P.RASE" if penalized else "RASE"), ("rase_u", "U.RASE")):
        values = _stack(rows, stored)
        if values is not None:
            out += _summary(name, values[:, :, 0].mean(axis=0)[:, None], per_index=False)
    return out


def _mse(values: np.ndarray, truth: Truth) -> float:
    return float(np.mean(np.sum((values - truth.loadings[None]) ** 2, axis=(1, 2))))


def _selection_metrics(rows: pd.DataFrame, truth: Truth) -> list[dict]:
    out = []
    beta = _stack(rows, "beta")
    if beta is None:
        return out
    counts = np.array([selection_counts(b, truth.support) for b in beta], dtype=float)
    for k, name in enumerate(("C", "IC", "CF")):
        out.append({"quantity": name, "component": 0, "index": 0, "value": float(counts[:, k].mean())})
    for stored, name in (("beta_o", "O.MSE"), ("beta", "P.MSE"), ("beta_u", "U.MSE")):
        values = _stack(rows, stored)
        if values is not None:
            out.append({"quantity": name, "component": 0, "index": 0, "value": _mse(values, truth)})
    return out


def _structure_metrics(rows: pd.DataFrame, truth: Truth) -> list[dict]:
    flags = _stack(rows, "is_linear")
    if flags is None:
        return []
    flags = flags[:, :, 0] > 0.5
    out = _summary("ILC", flags.mean(axis=0)[:, None], per_index=False)
    correct = np.all(flags == np.asarray(truth.linear, dtype=bool)[None, :], axis=1)
    out.append({"quantity": "CIL", "component": 0, "index": 0, "value": float(correct.mean())})
    return out


def _band_metrics(rows: pd.DataFrame, truth: Truth) -> list[dict]:
    curve, se, grid = _stack(rows, "curve"), _stack(rows, "curve_se"), _stack(rows, "curve_u")
    if curve is None or se is None or grid is None:
        return []
    target = np.stack([
        np.stack([truth.curve(l + 1, points[l]) for l in range(curve.shape[1])]) for points in grid
    ])
    covered = np.abs(curve - target) <= Z_975 * se
    return (
        _summary("curve_esd", _sd(curve))
        + _summary("curve_asd", se.mean(axis=0))
        + _summary("curve_coverage", covered.mean(axis=0))
    )


_DISPATCH = {
    "loadings": _loading_metrics,
    "curves": _curve_metrics,
    "selection": _selection_metrics,
    "structure": _structure_metrics,
    "bands": _band_metrics,
}


def compute_metrics(rows: pd.DataFrame, truth: Truth, kind: MetricKind) -> pd.DataFrame:
    """
    Aggregate stored replication rows into summary rows.

    Args:
        rows: Replication rows with columns replication, quantity, component, index, value
        truth: Truth the estimates are compared against
        kind: "loadings" (Bias, MAD, ESD, ASD), "curves" (RASE), "selection" (C, IC, CF, MSEs),
            "structure" (ILC, CIL) or "bands" (curve ESD, ASD and coverage)

    Returns:
        DataFrame with columns quantity, component, index, value
    """
    if kind not in _DISPATCH:
        raise ParameterError(f"unknown metric kind '{kind}', expected one of {METRIC_KINDS}")
    return pd.DataFrame(_DISPATCH[kind](rows, truth), columns=SUMMARY_COLUMNS)


def summarize(rows: pd.DataFrame, truth: Truth, kinds: Iterable[str] = METRIC_KINDS) -> pd.DataFrame:
    """All available aggregates stacked in one table."""
    frames = [compute_metrics(rows, truth, kind) for kind in kinds]
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    return pd.concat(frames, ignore_index=True)
