"""Replication driver for the simulation studies."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from config.settings import FitConfig, PenaltyConfig, SimulateConfig, TuningConfig
from core import model
from core.model import Dataset
from estimation.estimator import VicmFit, fit
from estimation.inference import cov_loadings, curve_bands
from estimation.sparsity import ScadPenalty, select_loadings
from estimation.structure import identify_linear
from estimation.tuning import msic_alpha1, msic_alpha2
from simulation.designs import Truth, error_law, example3_pn, generate
from simulation.metrics import ROW_COLUMNS, SUMMARY_COLUMNS, matrix_rows, rase, scalar_row, summarize, vector_rows
from utils.errors import ParameterError, VicmError
from utils.logger import log

PIPELINES = ("fit_only", "select", "select+identify")
# A report with more failed replications than this share is unreliable
FAILURE_LIMIT = 0.2
# Quantiles of the true index law at which curve bands are scored
BAND_GRID = (0.2, 0.35, 0.5, 0.65, 0.8)
# Draws used to locate those quantiles, shared by all replications
REFERENCE_SIZE = 10_000


@dataclass(frozen=True)
class SimulationReport:
    """Replication rows, failures and the aggregates computed from them."""
    design: SimulateConfig
    pipeline: str
    rows: pd.DataFrame = field(repr=False)
    aggregates: pd.DataFrame = field(repr=False)
    failures: tuple = ()  # (replication, reason)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def n_successful(self) -> int:
        return self.design.replications - self.n_failed

    @property
    def unreliable(self) -> bool:
        return self.n_failed > FAILURE_LIMIT * self.design.replications

    def to_dict(self) -> dict:
        """Convert to dictionary (the JSON summary)."""
        return {
            "design": self.design.model_dump(mode="json"),
            "pipeline": self.pipeline,
            "replications": self.design.replications,
            "n_successful": self.n_successful,
            "n_failed": self.n_failed,
            "unreliable": self.unreliable,
            "failures": [{"replication": r, "reason": reason} for r, reason in self.failures],
            "aggregates": self.aggregates.to_dict(orient="records"),
        }


def truth_for(design: SimulateConfig) -> Truth:
    """Truth of a design at its quantile level, without drawing data."""
    rng = np.random.default_rng(0)
    pn = design.pn if design.pn is not None else example3_pn(design.n)
    _, truth = generate(design.example, 1, error_law(design.error), rng, design.tau, design.sigma, pn)
    return truth


def _curve_rase(fitted: VicmFit, dataset: Dataset, truth: Truth) -> np.ndarray:
    """RASE of every component at the estimated index points Z_i^T beta-hat_l."""
    index = model.index_values(dataset.z, fitted.loadings)
    return np.array([
        rase(fitted.curve(l, index[:, l - 1]), truth.curve(l, index[:, l - 1]))
        for l in range(1, fitted.d + 1)
    ])


def band_grid(design: SimulateConfig) -> np.ndarray:
    """One d x 5 grid of raw index points, quantiles of the true index over a large reference draw."""
    rng = np.random.default_rng([design.seed, 0])
    pn = design.pn if design.pn is not None else example3_pn(design.n)
    reference, truth = generate(design.example, REFERENCE_SIZE, error_law(design.error), rng, design.tau, design.sigma, pn)
    index = model.index_values(reference.z, truth.loadings)
    return np.quantile(index, BAND_GRID, axis=0).T


def run_one(
    design: SimulateConfig,
    pipeline: str,
    replication: int,
    fit_config: FitConfig,
    penalty_config: PenaltyConfig,
    tuning_config: TuningConfig,
    grid: Optional[np.ndarray] = None,
) -> list[dict]:
    """Generate one dataset, run the pipeline and return its long rows."""
    rng = np.random.default_rng([design.seed, replication])
    dataset, truth = generate(design.example, design.n, error_law(design.error), rng, design.tau, design.sigma, design.pn)
    tau = design.tau
    config = fit_config.model_copy(update={"tau": tau})

    base = fit(dataset, tau, config)
    rows: list[dict] = []

    if pipeline == "fit_only":
        cov = cov_loadings(base, dataset=dataset)
        rows += matrix_rows(replication, "beta", base.loadings)
        rows += matrix_rows(replication, "asd", cov.asd_full.reshape(base.d, base.p))
        rows += vector_rows(replication, "rase", _curve_rase(base, dataset, truth))
        if design.example == 2:
            grid = band_grid(design) if grid is None else grid
            bands = [curve_bands(base, l + 1, grid[l], dataset=dataset) for l in range(base.d)]
            rows += matrix_rows(replication, "curve_u", grid)
            rows += matrix_rows(replication, "curve", [b.m_hat for b in bands])
            rows += matrix_rows(replication, "curve_se", [b.se for b in bands])
        return rows

    alpha1 = penalty_config.alpha1
    if alpha1 is None:
        alpha1, _, sparse = msic_alpha1(dataset, tau, config, tuning_config.alpha1_grid, base, penalty_config)
    else:
        pen1 = ScadPenalty.from_config(penalty_config, alpha1)
        sparse = select_loadings(dataset, tau, pen1, config, base, penalty_config.max_mm)
    oracle = fit(dataset, tau, config, free_mask=truth.support)
    cov = cov_loadings(sparse, dataset=dataset, penalty=ScadPenalty.from_config(penalty_config, alpha1))

    rows += matrix_rows(replication, "beta_u", base.loadings)
    rows += vector_rows(replication, "rase_u", _curve_rase(base, dataset, truth))
    rows += matrix_rows(replication, "beta", sparse.loadings)
    rows += matrix_rows(replication, "beta_o", oracle.loadings)
    rows += matrix_rows(replication, "asd", cov.asd_full.reshape(sparse.d, sparse.p))
    rows.append(scalar_row(replication, "alpha1", alpha1))

    final = sparse
    if pipeline == "select+identify":
        alpha2 = penalty_config.alpha2
        if alpha2 is None:
            alpha2, _, report = msic_alpha2(dataset, tau, sparse, tuning_config.alpha2_grid, penalty_config)
        else:
            report = identify_linear(dataset, tau, ScadPenalty.from_config(penalty_config, alpha2), sparse, penalty_config)
        final = report.fit
        rows += vector_rows(replication, "is_linear", report.is_linear.astype(float))
        rows.append(scalar_row(replication, "alpha2", alpha2))
    rows += vector_rows(replication, "rase", _curve_rase(final, dataset, truth))
    return rows


def run_replications(
    design: SimulateConfig,
    pipeline: Optional[str] = None,
    fit_config: Optional[FitConfig] = None,
    penalty_config: Optional[PenaltyConfig] = None,
    tuning_config: Optional[TuningConfig] = None,
    threads: int = 1,
) -> SimulationReport:
    """
    Run a Monte Carlo study.

    Args:
        design: Example, error law, sample size, quantile level, replications and seed
        pipeline: "fit_only", "select" or "select+identify"; defaults by example
        fit_config: Estimation settings
        penalty_config: Fixed penalty levels (None -> MSIC) and SCAD settings
        tuning_config: MSIC grids
        threads: Replications run in parallel

    Returns:
        SimulationReport; failed replications are excluded from the aggregates
    """
    pipeline = pipeline or design.resolved_pipeline()
    if pipeline not in PIPELINES:
        raise ParameterError(f"unknown pipeline '{pipeline}', expected one of {PIPELINES}")
    if design.example == 2 and pipeline != "fit_only":
        raise ParameterError("example 2 supports only the fit_only pipeline")
    fit_config = fit_config or FitConfig(tau=design.tau)
    penalty_config = penalty_config or PenaltyConfig()
    tuning_config = tuning_config or TuningConfig()

    log.info(
        f"Simulating example {design.example} ({design.error}, n={design.n}, tau={design.tau}) "
        f"with {design.replications} replications, pipeline={pipeline}, threads={threads}"
    )

    grid = band_grid(design) if design.example == 2 else None

    def task(replication: int):
        try:
            return replication, run_one(design, pipeline, replication, fit_config, penalty_config, tuning_config, grid), None
        except (VicmError, np.linalg.LinAlgError) as e:
            log.warning(f"replication {replication} failed: {e}")
            return replication, [], f"{getattr(e, 'kind', type(e).__name__)}: {e}"

    replications = range(1, design.replications + 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, replications))
    else:
        results = [task(r) for r in replications]
    results.sort(key=lambda item: item[0])

    rows = pd.DataFrame([row for _, rep_rows, _ in results for row in rep_rows], columns=ROW_COLUMNS)
    failures = tuple((r, reason) for r, _, reason in results if reason is not None)
    aggregates = summarize(rows, truth_for(design)) if not rows.empty else pd.DataFrame(columns=SUMMARY_COLUMNS)

    report = SimulationReport(design=design, pipeline=pipeline, rows=rows, aggregates=aggregates, failures=failures)
    if report.unreliable:
        log.warning(f"{report.n_failed} of {design.replications} replications failed; report is unreliable")
    else:
        log.success(f"Simulation done: {report.n_successful} of {design.replications} replications succeeded")
    return report
