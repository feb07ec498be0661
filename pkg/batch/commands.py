"""Batch command line: fit, select, identify, tune, simulate and predict."""

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from batch import writers
from batch.dataset_loader import load_covariates, load_from_config
from config.settings import RunConfig, load_run_config, settings
from core.model import Dataset
from estimation.estimator import VicmFit, fit
from estimation.inference import CovarianceReport, cov_loadings, curve_bands
from estimation.sparsity import ScadPenalty, select_loadings
from estimation.structure import identify_linear
from estimation.tuning import cv_bandwidth, msic_alpha1, msic_alpha2
from simulation.runner import run_replications
from utils.errors import ConfigError, VicmError
from utils.logger import log, set_level


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as ConfigError."""

    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _columns(value: str) -> list[str]:
    return [c.strip() for c in value.split(",") if c.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vicm", description="Varying index coefficient quantile regression")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run file with [model], [fit], [penalty], ... sections")
    common.add_argument("--data", type=Path, help="input CSV")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--tau", type=float, help="quantile level")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker threads (default VICM_THREADS or 1)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING, ...")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--response", help="response column")
    data.add_argument("--x-cols", type=_columns, help="comma-separated X columns")
    data.add_argument("--z-cols", type=_columns, help="comma-separated Z columns")
    data.add_argument("--no-intercept", action="store_true", help="do not prepend a column of ones to X")
    data.add_argument("--standardize-z", action="store_true", help="center and scale Z")
    data.add_argument("--knots", type=int, help="interior knot count")
    data.add_argument("--bandwidth", type=float, help="smoothing bandwidth h")

    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subparsers.add_parser("fit", parents=[common, data], help="unpenalized fit with sandwich standard errors")
    select = subparsers.add_parser("select", parents=[common, data], help="SCAD loading selection")
    select.add_argument("--alpha1", type=float, help="loading penalty level (default: MSIC)")
    identify = subparsers.add_parser("identify", parents=[common, data], help="selection then linear-component identification")
    identify.add_argument("--alpha1", type=float, help="loading penalty level (default: MSIC)")
    identify.add_argument("--alpha2", type=float, help="curvature penalty level (default: MSIC)")
    subparsers.add_parser("tune", parents=[common, data], help="cross-validated bandwidth")
    simulate = subparsers.add_parser("simulate", parents=[common], help="Monte Carlo study")
    simulate.add_argument("--example", type=int, choices=[1, 2, 3])
    simulate.add_argument("--error", choices=["sn", "t3", "la", "mn"])
    simulate.add_argument("--n", type=int)
    simulate.add_argument("--pn", type=int)
    simulate.add_argument("--replications", type=int)
    simulate.add_argument("--pipeline", choices=["fit_only", "select", "select+identify"])
    simulate.add_argument("--alpha1", type=float)
    simulate.add_argument("--alpha2", type=float)
    predict = subparsers.add_parser("predict", parents=[common], help="predictions from a saved fit.json")
    predict.add_argument("--model", type=Path, help="fit.json written by fit, select or identify")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Run file, then command-line overrides."""
    config = load_run_config(args.config)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    config = config.with_overrides(
        "fit", tau=get("tau"), seed=get("seed"), knots=get("knots"), bandwidth=get("bandwidth")
    )
    config = config.with_overrides("penalty", alpha1=get("alpha1"), alpha2=get("alpha2"))
    config = config.with_overrides(
        "simulate",
        example=get("example"), error=get("error"), n=get("n"), pn=get("pn"), tau=get("tau"),
        replications=get("replications"), seed=get("seed"), pipeline=get("pipeline"),
    )
    config = config.with_overrides(
        "io",
        data=get("data"), out=get("out"), model=get("model"), response=get("response"),
        x_cols=get("x_cols"), z_cols=get("z_cols"),
        add_intercept=False if get("no_intercept") else None,
        standardize_z=True if get("standardize_z") else None,
    )
    return config


def _threads(args: argparse.Namespace) -> int:
    threads = args.threads if args.threads is not None else settings.system.threads
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return threads


def _write_fit(out: Path, fitted: VicmFit, cov: CovarianceReport, dataset: Dataset, config: RunConfig):
    bands = [curve_bands(fitted, l, dataset=dataset) for l in range(1, fitted.d + 1)]
    writers.write_json(out / "fit.json", writers.fit_to_dict(
        fitted, cov, dataset.x_names, dataset.z_names, config.io.add_intercept, dataset.z_center, dataset.z_scale,
    ))
    writers.write_csv(out / "coeffs.csv", writers.COEFFS_HEADER, writers.coeff_rows(fitted))
    writers.write_csv(out / "curves.csv", writers.CURVES_HEADER, writers.curve_rows(bands))


def _select(dataset: Dataset, config: RunConfig, base: VicmFit, threads: int):
    tau, alpha1 = config.fit.tau, config.penalty.alpha1
    table = None
    if alpha1 is None:
        alpha1, table, sparse = msic_alpha1(
            dataset, tau, config.fit, config.tuning.alpha1_grid, base, config.penalty, threads
        )
    else:
        sparse = select_loadings(
            dataset, tau, ScadPenalty.from_config(config.penalty, alpha1), config.fit, base, config.penalty.max_mm
        )
    selection = {
        "alpha1": alpha1,
        "support": sparse.support,
        "loadings": sparse.loadings,
        "converged": sparse.converged,
        "stop_reason": sparse.stop_reason,
        "msic": [] if table is None else table[writers.MSIC_HEADER].to_dict(orient="records"),
    }
    return sparse, alpha1, selection


def cmd_fit(config: RunConfig, threads: int) -> int:
    dataset = load_from_config(config.io)
    fitted = fit(dataset, config.fit.tau, config.fit)
    cov = cov_loadings(fitted, dataset=dataset)
    _write_fit(config.io.out, fitted, cov, dataset, config)
    log.success(f"Wrote fit.json, coeffs.csv and curves.csv to {config.io.out}")
    return 0


def cmd_select(config: RunConfig, threads: int) -> int:
    dataset = load_from_config(config.io)
    base = fit(dataset, config.fit.tau, config.fit)
    sparse, alpha1, selection = _select(dataset, config, base, threads)
    cov = cov_loadings(sparse, dataset=dataset, penalty=ScadPenalty.from_config(config.penalty, alpha1))
    _write_fit(config.io.out, sparse, cov, dataset, config)
    writers.write_json(config.io.out / "selection.json", selection)
    log.success(f"Wrote selection results to {config.io.out}")
    return 0


def cmd_identify(config: RunConfig, threads: int) -> int:
    dataset = load_from_config(config.io)
    tau = config.fit.tau
    base = fit(dataset, tau, config.fit)
    sparse, alpha1, selection = _select(dataset, config, base, threads)
    alpha2, table = config.penalty.alpha2, None
    if alpha2 is None:
        alpha2, table, report = msic_alpha2(dataset, tau, sparse, config.tuning.alpha2_grid, config.penalty, threads)
    else:
        report = identify_linear(dataset, tau, ScadPenalty.from_config(config.penalty, alpha2), sparse, config.penalty)
    structure = report.to_dict()
    structure["msic"] = [] if table is None else table[writers.MSIC_HEADER].to_dict(orient="records")

    cov = cov_loadings(report.fit, dataset=dataset, penalty=ScadPenalty.from_config(config.penalty, alpha1))
    _write_fit(config.io.out, report.fit, cov, dataset, config)
    writers.write_json(config.io.out / "selection.json", selection)
    writers.write_json(config.io.out / "structure.json", structure)
    log.success(f"Wrote structure results to {config.io.out}")
    return 0


def cmd_tune(config: RunConfig, threads: int) -> int:
    dataset = load_from_config(config.io)
    h, table = cv_bandwidth(
        dataset, config.fit.tau, config.fit, config.tuning.delta_grid, config.tuning.folds, threads=threads
    )
    writers.write_csv(config.io.out / "tuning.csv", writers.TUNING_HEADER, table)
    log.success(f"Selected bandwidth {h:.6g}; table written to {config.io.out / 'tuning.csv'}")
    return 0


def cmd_simulate(config: RunConfig, threads: int) -> int:
    report = run_replications(
        config.simulate,
        fit_config=config.fit.model_copy(update={"tau": config.simulate.tau}),
        penalty_config=config.penalty,
        tuning_config=config.tuning,
        threads=threads,
    )
    writers.write_csv(config.io.out / "simreport.csv", writers.SIMREPORT_HEADER, report.rows)
    writers.write_json(config.io.out / "simsummary.json", report.to_dict())
    return 0


def cmd_predict(config: RunConfig, threads: int) -> int:
    saved = writers.load_fit_json(config.io.model)
    x_cols = config.io.x_cols or saved.x_cols
    z_cols = config.io.z_cols or list(saved.z_names)
    x, z = load_covariates(config.io.data, x_cols, z_cols, saved.add_intercept, saved.z_center, saved.z_scale)
    pred = saved.predict(x, z)
    rows = [(i + 1, float(v)) for i, v in enumerate(pred)]
    writers.write_csv(config.io.out / "predictions.csv", writers.PREDICTIONS_HEADER, rows)
    log.success(f"Wrote {len(rows)} predictions to {config.io.out}")
    return 0


HANDLERS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "identify": cmd_identify,
    "tune": cmd_tune,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
}


def _report(code: int, kind: str, message: str):
    reason = " ".join(str(message).split())
    print(f"vicm-error code={code} kind={kind} reason={reason}", file=sys.stderr)


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one batch command.

    Returns:
        Exit code: 0 success, 1 usage or configuration, 2 data, 3 numeric failure
    """
    try:
        args = build_parser().parse_args(argv)
        if args.log_level:
            set_level(args.log_level)
        config = resolve_config(args)
        command = args.command
        config.validate_paths(
            need_data=command in ("fit", "select", "identify", "tune", "predict"),
            need_model=command == "predict",
        )
        if command in ("fit", "select", "identify", "tune") and not config.io.z_cols:
            raise ConfigError("z columns are required (--z-cols or [io] z_cols)")
        threads = _threads(args)
        return HANDLERS[command](config, threads)
    except SystemExit as e:
        return int(e.code or 0)
    except VicmError as e:
        _report(e.exit_code, e.kind, e)
        log.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        _report(3, "internal", f"{type(e).__name__}: {e}")
        log.exception("Unexpected failure")
        return 3
