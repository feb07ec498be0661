"""Data-driven choice of the knot count, bandwidth and penalty levels."""

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from config.settings import FitConfig, PenaltyConfig
from core.model import Dataset
from core.quantile import check_tau, total_check_loss
from estimation.estimator import VicmFit, fit
from estimation.sparsity import ScadPenalty, select_loadings
from estimation.structure import StructureReport, identify_linear
from splines.basis import default_knots
from utils.errors import ParameterError, TuningError, VicmError
from utils.logger import log

__all__ = [
    "default_knots",
    "c_n",
    "msic_value",
    "msic2_value",
    "cv_bandwidth",
    "msic_alpha1",
    "msic_alpha2",
]

DEFAULT_DELTAS = tuple(round(0.1 * k, 1) for k in range(1, 11))
# Relative MSIC difference treated as a tie
TIE_TOL = 1e-12


def c_n(d: int, p: int) -> float:
    """Diverging MSIC factor max(1, log(log(d p)))."""
    size = d * p
    if size <= np.e:
        return 1.0
    return float(max(1.0, np.log(np.log(size))))


def _log_loss(loss: float) -> float:
    return float(np.log(max(loss, np.finfo(float).tiny)))


def msic_value(loss: float, n: int, df: int, cn: float) -> float:
    """log L + df C_n log(n) / (2n)."""
    return _log_loss(loss) + df * cn * np.log(n) / (2.0 * n)


def msic2_value(loss: float, n: int, df: int, dim: int) -> float:
    """log L + df J_n log(n) / (2n)."""
    return _log_loss(loss) + df * dim * np.log(n) / (2.0 * n)


def _pick(table: pd.DataFrame) -> int:
    """Row of the smallest MSIC; ties go to the larger penalty level."""
    valid = table[table["valid"]]
    best = valid["msic"].min()
    tied = valid[valid["msic"] <= best + TIE_TOL * max(1.0, abs(best))]
    return int(tied["alpha"].idxmax())


def _map(func, items, threads: int) -> list:
    if threads <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def fold_labels(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index of every observation from a seeded permutation."""
    labels = np.empty(n, dtype=int)
    labels[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
    return labels


def cv_bandwidth(
    dataset: Dataset,
    tau: float,
    config: Optional[FitConfig] = None,
    delta_grid: Optional[Sequence[float]] = None,
    folds: int = 5,
    seed: Optional[int] = None,
    threads: int = 1,
) -> tuple[float, pd.DataFrame]:
    """
    Choose h = n^-delta by K-fold cross-validated check loss.

    Args:
        dataset: Observations, n >= 10
        tau: Quantile level
        config: Fit settings used inside every fold
        delta_grid: Exponents delta; defaults to 0.1, ..., 1.0
        folds: Number of folds
        seed: Fold-assignment seed; defaults to config.seed
        threads: Grid points evaluated in parallel

    Returns:
        (best bandwidth, table with columns delta, bandwidth, pe, valid, reason)
    """
    tau = check_tau(tau)
    config = config or FitConfig(tau=tau)
    n = dataset.n
    if n < 10:
        raise ParameterError(f"cross-validation needs n >= 10, got {n}")
    if folds < 2 or folds > n:
        raise ParameterError(f"folds must be in 2..{n}, got {folds}")
    deltas = list(DEFAULT_DELTAS if delta_grid is None else delta_grid)
    labels = fold_labels(n, folds, config.seed if seed is None else seed)

    def evaluate(delta: float) -> dict:
        h = float(n) ** -delta
        total = 0.0
        for v in range(folds):
            train, test = dataset.subset(labels != v), dataset.subset(labels == v)
            try:
                fold_fit = fit(train, tau, config, bandwidth=h)
                total += total_check_loss(tau, test.y - fold_fit.predict(test.x, test.z))
            except VicmError as e:
                log.warning(f"delta={delta:g}: fold {v + 1} failed ({e})")
                return {"delta": delta, "bandwidth": h, "pe": np.nan, "valid": False, "reason": f"fold {v + 1}: {e}"}
        log.debug(f"delta={delta:g}: h={h:.4g}, PE={total / n:.6g}")
        return {"delta": delta, "bandwidth": h, "pe": total / n, "valid": True, "reason": ""}

    table = pd.DataFrame(_map(evaluate, deltas, threads))
    if not table["valid"].any():
        raise TuningError("every bandwidth candidate failed")
    best = table.loc[table[table["valid"]]["pe"].idxmin()]
    log.success(f"CV bandwidth: delta={best['delta']:g}, h={best['bandwidth']:.4g}")
    return float(best["bandwidth"]), table


def msic_alpha1(
    dataset: Dataset,
    tau: float,
    config: Optional[FitConfig] = None,
    alpha_grid: Optional[Sequence[float]] = None,
    init: Optional[VicmFit] = None,
    penalty_config: Optional[PenaltyConfig] = None,
    threads: int = 1,
) -> tuple[float, pd.DataFrame, VicmFit]:
    """
    Choose the loading penalty level by MSIC.

    Args:
        dataset: Observations
        tau: Quantile level
        config: Fit settings
        alpha_grid: Candidate alpha_1 values
        init: Unpenalized fit to start every selection from
        penalty_config: SCAD shape, thresholds and MM limit
        threads: Grid points evaluated in parallel

    Returns:
        (best alpha_1, table with columns alpha, loss, df, msic, valid, reason, selected fit)
    """
    tau = check_tau(tau)
    config = config or FitConfig(tau=tau)
    penalty_config = penalty_config or PenaltyConfig()
    grid = list(np.logspace(-3, 0, 20) if alpha_grid is None else alpha_grid)
    if not grid:
        raise ParameterError("alpha grid is empty")
    if init is None:
        init = fit(dataset, tau, config)
    cn = c_n(dataset.d, dataset.p)
    n = dataset.n

    def evaluate(alpha: float):
        try:
            pen = ScadPenalty.from_config(penalty_config, alpha)
            sparse = select_loadings(dataset, tau, pen, config, init, penalty_config.max_mm)
        except VicmError as e:
            log.warning(f"alpha1={alpha:.4g} failed ({e})")
            return {"alpha": alpha, "loss": np.nan, "df": -1, "msic": np.nan, "valid": False, "reason": str(e)}, None
        df = int(np.count_nonzero(sparse.reduced))
        value = msic_value(sparse.objective, n, df, cn)
        return {"alpha": alpha, "loss": sparse.objective, "df": df, "msic": value, "valid": True, "reason": ""}, sparse

    results = _map(evaluate, grid, threads)
    table = pd.DataFrame([row for row, _ in results])
    if not table["valid"].any():
        raise TuningError("every alpha1 candidate failed")
    best = _pick(table)
    log.success(f"MSIC alpha1={grid[best]:.4g} ({table.loc[best, 'df']} nonzero loadings)")
    return float(grid[best]), table, results[best][1]


def msic_alpha2(
    dataset: Dataset,
    tau: float,
    sparse_fit: VicmFit,
    alpha_grid: Optional[Sequence[float]] = None,
    penalty_config: Optional[PenaltyConfig] = None,
    threads: int = 1,
) -> tuple[float, pd.DataFrame, StructureReport]:
    """
    Choose the curvature penalty level by MSIC with df = number of nonlinear components.

    Returns:
        (best alpha_2, table with columns alpha, loss, df, msic, valid, reason, structure report)
    """
    tau = check_tau(tau)
    penalty_config = penalty_config or PenaltyConfig()
    grid = list(np.logspace(-2, 1, 20) if alpha_grid is None else alpha_grid)
    if not grid:
        raise ParameterError("alpha grid is empty")
    n, dim = dataset.n, sparse_fit.basis.dim

    def evaluate(alpha: float):
        try:
            pen = ScadPenalty.from_config(penalty_config, alpha)
            report = identify_linear(dataset, tau, pen, sparse_fit, penalty_config)
        except VicmError as e:
            log.warning(f"alpha2={alpha:.4g} failed ({e})")
            return {"alpha": alpha, "loss": np.nan, "df": -1, "msic": np.nan, "valid": False, "reason": str(e)}, None
        loss = report.fit.objective
        df = report.nonlinear_count
        return {"alpha": alpha, "loss": loss, "df": df, "msic": msic2_value(loss, n, df, dim), "valid": True, "reason": ""}, report

    results = _map(evaluate, grid, threads)
    table = pd.DataFrame([row for row, _ in results])
    if not table["valid"].any():
        raise TuningError("every alpha2 candidate failed")
    best = _pick(table)
    log.success(f"MSIC alpha2={grid[best]:.4g} ({table.loc[best, 'df']} nonlinear components)")
    return float(grid[best]), table, results[best][1]
