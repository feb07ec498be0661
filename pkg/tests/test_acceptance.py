"""
Monte Carlo checks against published accuracy.

Replication counts and bands follow the published tables. Run with `pytest -m slow`.
"""

import numpy as np
import pytest

from config.settings import SimulateConfig
from simulation.runner import run_replications

pytestmark = pytest.mark.slow


def _value(report, quantity, component=0, index=0):
    table = report.aggregates
    row = table[(table["quantity"] == quantity) & (table["component"] == component) & (table["index"] == index)]
    return float(row["value"].item())


def _matrix(report, quantity, d, p):
    table = report.aggregates
    return table[table["quantity"] == quantity]["value"].to_numpy().reshape(d, p)


@pytest.fixture(scope="module")
def example1_report():
    return run_replications(SimulateConfig(example=1, error="sn", n=500, replications=100, seed=7), threads=4)


def test_example1_bias_and_mad(example1_report):
    assert example1_report.n_failed == 0
    assert np.all(np.abs(_matrix(example1_report, "bias", 3, 3)) <= 0.015)
    assert 0.017 <= _value(example1_report, "mad", 1, 1) <= 0.050


def test_example1_sandwich_calibration(example1_report):
    ratio = _matrix(example1_report, "asd", 3, 3) / _matrix(example1_report, "esd", 3, 3)
    assert np.all((ratio >= 0.7) & (ratio <= 1.3))


@pytest.mark.parametrize("error", ["sn", "t3"])
def test_curve_rate(error):
    rase = []
    for n in (500, 1500):
        report = run_replications(SimulateConfig(example=1, error=error, n=n, replications=50, seed=3), threads=4)
        rase.append(np.array([_value(report, "RASE", l) for l in (1, 2, 3)]))
    assert np.all(rase[1] < rase[0])


@pytest.mark.parametrize("error", ["t3", "mn"])
def test_heavy_tail_robustness(error):
    report = run_replications(SimulateConfig(example=1, error=error, n=1500, replications=50, seed=5), threads=4)
    assert _value(report, "mad", 1, 1) < 0.035


def test_example2_quantile_truth():
    report = run_replications(SimulateConfig(example=2, n=500, tau=0.75, replications=50, seed=9), threads=4)
    assert np.all(np.abs(_matrix(report, "bias", 3, 3)) <= 0.12)
    assert _value(report, "RASE", 1) <= 0.2


def test_example2_band_coverage():
    report = run_replications(SimulateConfig(example=2, n=500, tau=0.5, replications=100, seed=13), threads=4)
    coverage = _matrix(report, "curve_coverage", 3, 5)
    assert np.all((coverage >= 0.85) & (coverage <= 0.99))


@pytest.fixture(scope="module")
def example3_report():
    design = SimulateConfig(example=3, error="sn", n=500, pn=7, replications=100, seed=11)
    return run_replications(design, pipeline="select+identify", threads=4)


def test_example3_selection(example3_report):
    assert _value(example3_report, "C") >= 15.0
    assert _value(example3_report, "IC") <= 0.1
    assert _value(example3_report, "CF") >= 0.80
    assert _value(example3_report, "P.MSE") <= 0.6 * _value(example3_report, "U.MSE")


def test_example3_structure(example3_report):
    assert _value(example3_report, "ILC", 1) <= 0.05
    assert _value(example3_report, "ILC", 2) <= 0.05
    assert _value(example3_report, "ILC", 3) >= 0.60
    assert _value(example3_report, "ILC", 4) >= 0.60
    assert _value(example3_report, "CIL") >= 0.55


def test_example3_linear_curves_improve(example3_report):
    for l in (3, 4):
        assert _value(example3_report, "P.RASE", l) <= 0.7 * _value(example3_report, "U.RASE", l)
