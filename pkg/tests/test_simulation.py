"""Tests for simulation designs, metrics and the replication driver."""

import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from config.settings import FitConfig, PenaltyConfig, SimulateConfig
from simulation.designs import (
    equicorrelated_normal,
    error_law,
    example2_curves,
    example2_loadings,
    example3_pn,
    gen_example1,
    gen_example2,
    gen_example3,
    quantile_shift,
    sample_error,
)
from simulation.metrics import (
    compute_metrics,
    matrix_rows,
    rase,
    selection_counts,
    summarize,
    vector_rows,
)
from simulation.runner import band_grid, run_replications, truth_for
from utils.errors import ParameterError

QUICK = FitConfig(init_random_starts=1, init_ls_iterations=5)


class TestErrorLaws:
    def test_median_shift_is_zero(self):
        for kind in ("sn", "t3", "la", "mn"):
            assert quantile_shift(error_law(kind), 0.5) == pytest.approx(0.0, abs=1e-9)

    def test_quartile_shifts(self):
        assert quantile_shift(error_law("sn"), 0.75) == pytest.approx(0.674490, abs=1e-6)
        assert quantile_shift(error_law("la"), 0.75) == pytest.approx(math.log(2.0), abs=1e-9)
        assert quantile_shift(error_law("la"), 0.25) == pytest.approx(-math.log(2.0), abs=1e-9)
        assert quantile_shift(error_law("t3"), 0.75) == pytest.approx(0.764892, abs=1e-5)

    def test_mixture_quantile(self):
        law = error_law("mn")
        shift = quantile_shift(law, 0.9)
        assert law.cdf(shift) == pytest.approx(0.9, abs=1e-10)

    def test_sample_error(self):
        law = error_law("la")
        assert isinstance(sample_error(law, np.random.default_rng(0)), float)
        draws = sample_error(law, np.random.default_rng(0), 50_000)
        assert np.median(draws) == pytest.approx(0.0, abs=0.03)
        assert np.mean(np.abs(draws)) == pytest.approx(1.0, abs=0.03)

    def test_unknown_law(self):
        with pytest.raises(ParameterError):
            error_law("cauchy")


class TestDesigns:
    def test_equicorrelation(self):
        draws = equicorrelated_normal(np.random.default_rng(1), 100_000, 3, 0.5)
        corr = np.corrcoef(draws, rowvar=False)
        assert_allclose(corr[np.triu_indices(3, 1)], 0.5, atol=0.01)
        assert_allclose(draws.var(axis=0), 1.0, atol=0.02)

    def test_example1(self, rng):
        data, truth = gen_example1(50, error_law("sn"), rng)
        assert (data.n, data.d, data.p) == (50, 3, 3)
        assert_allclose(np.linalg.norm(truth.loadings, axis=1), 1.0)
        assert_allclose(truth.loadings[1], np.array([3.0, 2.0, 1.0]) / math.sqrt(14))
        assert_allclose(truth.curve(3, [2.0]), [4.0])

    def test_noiseless_example1(self, rng):
        data, truth = gen_example1(30, error_law("sn"), rng, sigma=0.0)
        index = data.z @ truth.loadings.T
        expected = sum(truth.curve(l + 1, index[:, l]) * data.x[:, l] for l in range(3))
        assert_allclose(data.y, expected)

    def test_example2_truth(self):
        loadings = example2_loadings(1.0)
        assert_allclose(loadings[0], np.array([1.0, 1.0, 2.0]) / math.sqrt(6))
        for tau in (0.1, 0.5, 0.9):
            assert_allclose(np.linalg.norm(example2_loadings(tau), axis=1), 1.0)
        assert example2_curves(0.5)[2](1.0) == pytest.approx(0.346574, abs=1e-6)

    def test_example2_draws(self, rng):
        data, truth = gen_example2(40, rng)
        assert np.all((data.z >= 0) & (data.z <= 1))
        assert truth.at(0.5).linear == (True, False, False)

    def test_example3(self, rng):
        data, truth = gen_example3(500, None, error_law("t3"), rng)
        assert data.p == 7 == example3_pn(500)
        assert int(np.sum(truth.loadings == 0)) == 16
        assert_allclose(np.linalg.norm(truth.loadings, axis=1), 1.0)
        assert truth.linear == (False, False, True, True)

    def test_example3_pn_too_small(self, rng):
        with pytest.raises(ParameterError):
            gen_example3(50, 2, error_law("sn"), rng)


class TestMetrics:
    def test_rase(self):
        assert rase([1.1, 2.1, 3.1], [1.0, 2.0, 3.0]) == pytest.approx(0.1)

    def test_selection_counts(self):
        truth = np.array([[1.0, 0.5, 0.0], [1.0, 0.0, 0.0]])
        assert selection_counts(truth, truth != 0) == (3, 0, True)
        est = np.array([[1.0, 0.0, 0.0], [1.0, 0.2, 0.0]])
        assert selection_counts(est, truth != 0) == (2, 1, False)

    def test_perfect_estimates(self):
        truth = truth_for(SimulateConfig(example=3, n=500, pn=7))
        rows = pd.DataFrame(
            matrix_rows(1, "beta", truth.loadings) + matrix_rows(2, "beta", truth.loadings)
            + vector_rows(1, "rase", np.zeros(4)) + vector_rows(2, "rase", np.zeros(4))
        )
        loadings = compute_metrics(rows, truth, "loadings")
        assert_allclose(loadings["value"], 0.0)
        selection = compute_metrics(rows, truth, "selection").set_index("quantity")["value"]
        assert selection["C"] == 16
        assert selection["IC"] == 0
        assert selection["CF"] == 1
        assert selection["P.MSE"] == 0
        assert_allclose(compute_metrics(rows, truth, "curves")["value"], 0.0)

    def test_two_replication_spread(self):
        truth = truth_for(SimulateConfig(example=1))
        a = 0.01
        rows = pd.DataFrame(matrix_rows(1, "beta", truth.loadings + a) + matrix_rows(2, "beta", truth.loadings - a))
        table = compute_metrics(rows, truth, "loadings")
        esd = table[table["quantity"] == "esd"]["value"]
        bias = table[table["quantity"] == "bias"]["value"]
        assert_allclose(esd, a * math.sqrt(2))
        assert_allclose(bias, 0.0, atol=1e-15)

    def test_single_replication_has_no_spread(self):
        truth = truth_for(SimulateConfig(example=1))
        rows = pd.DataFrame(matrix_rows(1, "beta", truth.loadings))
        table = compute_metrics(rows, truth, "loadings")
        assert table[table["quantity"] == "esd"]["value"].isna().all()

    def test_structure_metrics(self):
        truth = truth_for(SimulateConfig(example=3, n=500))
        rows = pd.DataFrame(
            vector_rows(1, "is_linear", [0, 0, 1, 1]) + vector_rows(2, "is_linear", [0, 1, 1, 1])
        )
        table = compute_metrics(rows, truth, "structure").set_index(["quantity", "component"])["value"]
        assert table[("CIL", 0)] == 0.5
        assert table[("ILC", 2)] == 0.5
        assert table[("ILC", 3)] == 1.0

    def test_bands_score_each_replication_at_its_own_points(self):
        truth = truth_for(SimulateConfig(example=2))
        rows = []
        for rep, shift in ((1, 0.0), (2, 0.05)):
            grid = np.linspace(0.3, 1.2, 5)[None, :] + shift + np.zeros((3, 1))
            curve = [truth.curve(l + 1, grid[l]) for l in range(3)]
            rows += matrix_rows(rep, "curve_u", grid) + matrix_rows(rep, "curve", curve)
            rows += matrix_rows(rep, "curve_se", np.full((3, 5), 1e-6))
        table = compute_metrics(pd.DataFrame(rows), truth, "bands")
        assert_allclose(table[table["quantity"] == "curve_coverage"]["value"], 1.0)

    def test_penalized_rase_label(self):
        truth = truth_for(SimulateConfig(example=3, n=500, pn=7))
        plain = compute_metrics(pd.DataFrame(vector_rows(1, "rase", np.ones(4))), truth, "curves")
        assert set(plain["quantity"]) == {"RASE"}
        rows = pd.DataFrame(vector_rows(1, "rase", np.ones(4)) + vector_rows(1, "rase_u", np.full(4, 2.0)))
        labelled = compute_metrics(rows, truth, "curves").set_index(["quantity", "component"])["value"]
        assert labelled[("P.RASE", 3)] == 1.0
        assert labelled[("U.RASE", 3)] == 2.0

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            compute_metrics(pd.DataFrame(), truth_for(SimulateConfig()), "power")

    def test_summarize_empty(self):
        rows = pd.DataFrame(columns=["replication", "quantity", "component", "index", "value"])
        assert summarize(rows, truth_for(SimulateConfig())).empty


class TestRunner:
    def test_single_replication(self):
        design = SimulateConfig(example=1, n=150, replications=1, seed=3)
        report = run_replications(design, fit_config=QUICK)
        assert report.n_successful == 1 and not report.unreliable
        beta = report.rows[report.rows["quantity"] == "beta"]["value"].to_numpy().reshape(3, 3)
        bias = report.aggregates[report.aggregates["quantity"] == "bias"]["value"].to_numpy().reshape(3, 3)
        assert_allclose(bias, beta - truth_for(design).loadings)
        assert report.to_dict()["pipeline"] == "fit_only"

    def test_deterministic(self):
        design = SimulateConfig(example=1, n=120, replications=2, seed=5)
        first = run_replications(design, fit_config=QUICK)
        second = run_replications(design, fit_config=QUICK, threads=2)
        pd.testing.assert_frame_equal(first.rows, second.rows)
        pd.testing.assert_frame_equal(first.aggregates, second.aggregates)

    def test_example2_bands(self):
        design = SimulateConfig(example=2, n=300, replications=2, seed=2)
        report = run_replications(design, fit_config=QUICK)
        quantities = set(report.aggregates["quantity"])
        assert {"curve_asd", "curve_coverage", "bias"} <= quantities
        grids = [part["value"].to_numpy() for _, part in report.rows[report.rows["quantity"] == "curve_u"].groupby("replication")]
        assert len(grids) == 2
        assert np.array_equal(grids[0], grids[1])
        assert_allclose(grids[0].reshape(3, 5), band_grid(design))

    def test_band_grid_is_increasing_and_seeded(self):
        design = SimulateConfig(example=2, seed=4)
        grid = band_grid(design)
        assert grid.shape == (3, 5)
        assert np.all(np.diff(grid, axis=1) > 0)
        assert np.array_equal(grid, band_grid(design))

    def test_example2_rejects_selection(self):
        with pytest.raises(ParameterError):
            run_replications(SimulateConfig(example=2, replications=1), pipeline="select")

    def test_unknown_pipeline(self):
        with pytest.raises(ParameterError):
            run_replications(SimulateConfig(replications=1), pipeline="bootstrap")

    def test_failures_are_reported(self):
        # 20 observations cannot support 3 x (3 + 6) coefficients
        design = SimulateConfig(example=1, n=20, replications=2)
        report = run_replications(design, fit_config=FitConfig(knots=6))
        assert report.n_failed == 2 and report.unreliable
        assert report.failures[0][1].startswith("insufficient_observations")
        assert report.aggregates.empty

    @pytest.mark.slow
    def test_selection_pipeline(self):
        design = SimulateConfig(example=3, n=200, replications=1, seed=1, pipeline="select+identify")
        penalty = PenaltyConfig(alpha1=0.02, alpha2=0.1)
        report = run_replications(design, fit_config=QUICK, penalty_config=penalty)
        assert report.n_successful == 1
        quantities = set(report.aggregates["quantity"])
        assert {"C", "IC", "CF", "O.MSE", "P.MSE", "U.MSE", "ILC", "CIL", "P.RASE", "U.RASE"} <= quantities
