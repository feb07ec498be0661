"""Tests for CSV loading, artifact writers and the batch commands."""

import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from batch import writers
from batch.commands import run_command
from batch.dataset_loader import load_dataset
from config.settings import FitConfig
from estimation.estimator import fit
from simulation.designs import error_law, gen_example1, gen_example3
from utils.errors import DataError

QUICK_RUN = """\
[fit]
init_random_starts = 1
init_ls_iterations = 5
"""


def _write_frame(path, data, x_names=("x2", "x3")):
    frame = pd.DataFrame({"y": data.y})
    for k, name in enumerate(x_names):
        frame[name] = data.x[:, k + 1]
    for k in range(data.p):
        frame[f"z{k + 1}"] = data.z[:, k]
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def example1_csv(tmp_path):
    data, _ = gen_example1(200, error_law("sn"), np.random.default_rng(12))
    return _write_frame(tmp_path / "ex1.csv", data)


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "quick.conf"
    path.write_text(QUICK_RUN)
    return path


class TestLoader:
    def test_small_file(self, tmp_path):
        path = tmp_path / "small.csv"
        path.write_text("y,x2,z1,z2,z3\n1.0,0.5,1,2,3\n2.0,-0.5,2,3,4\n3.0,1.5,3,4,6\n")
        data = load_dataset(path, "y", ["x2"], ["z1", "z2", "z3"])
        assert (data.n, data.d, data.p) == (3, 2, 3)
        assert data.x_names == ("intercept", "x2")
        assert_allclose(data.x[:, 0], 1.0)

    def test_blank_cell_is_located(self, tmp_path):
        path = tmp_path / "blank.csv"
        path.write_text("y,z1,z2\n1.0,1,2\n2.0,2,\n3.0,3,4\n")
        with pytest.raises(DataError) as info:
            load_dataset(path, "y", [], ["z1", "z2"])
        assert info.value.row == 2 and info.value.column == "z2"
        assert "row 2" in str(info.value)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("y,z1\n1.0,abc\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_dataset(path, "y", [], ["z1"])

    def test_missing_column(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("y,z1\n1.0,2.0\n")
        with pytest.raises(DataError, match="'z9'"):
            load_dataset(path, "y", [], ["z9"])

    def test_standardize(self, example1_csv):
        data = load_dataset(example1_csv, "y", ["x2", "x3"], ["z1", "z2", "z3"], standardize_z=True)
        assert np.max(np.abs(data.z.mean(axis=0))) < 1e-12
        assert_allclose(data.z.std(axis=0), 1.0)
        assert data.z_scale is not None


class TestWriters:
    def test_headers(self, tmp_path):
        path = writers.write_csv(tmp_path / "coeffs.csv", writers.COEFFS_HEADER, [(1, 1, 0.5)])
        assert path.read_text().splitlines()[0] == "component,index,coefficient"
        assert writers.CURVES_HEADER == ["component", "u", "m_hat", "se", "lo", "hi"]
        assert writers.SIMREPORT_HEADER == ["replication", "quantity", "component", "index", "value"]

    def test_json_is_sorted_and_nan_safe(self, tmp_path):
        path = writers.write_json(tmp_path / "x.json", {"b": np.nan, "a": np.arange(2)})
        assert json.loads(path.read_text()) == {"a": [0, 1], "b": None}
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_fit_round_trip(self, tmp_path):
        data, _ = gen_example1(150, error_law("sn"), np.random.default_rng(4))
        fitted = fit(data, 0.5, FitConfig(init_random_starts=1, init_ls_iterations=5))
        path = writers.write_json(tmp_path / "fit.json", writers.fit_to_dict(fitted, x_names=data.x_names, z_names=data.z_names))
        saved = writers.load_fit_json(path)
        assert np.array_equal(saved.loadings, fitted.loadings)
        assert np.array_equal(saved.coeffs, fitted.coeffs)
        assert_allclose(saved.predict(data.x, data.z), fitted.predict(data.x, data.z), rtol=0, atol=1e-12)

    def test_bad_model_file(self, tmp_path):
        path = tmp_path / "fit.json"
        path.write_text("{}")
        with pytest.raises(DataError):
            writers.load_fit_json(path)


class TestRunCommand:
    def test_usage_errors(self, capsys):
        assert run_command([]) == 1
        assert run_command(["fit", "--bogus"]) == 1
        assert "kind=config" in capsys.readouterr().err

    def test_unknown_log_level(self, example1_csv):
        assert run_command(["fit", "--data", str(example1_csv), "--z-cols", "z1", "--log-level", "LOUD"]) == 1

    def test_help(self):
        assert run_command(["--help"]) == 0

    def test_missing_data_file(self, tmp_path):
        assert run_command(["fit", "--data", str(tmp_path / "none.csv"), "--z-cols", "z1"]) == 1

    def test_missing_z_columns(self, example1_csv):
        assert run_command(["fit", "--data", str(example1_csv)]) == 1

    def test_bad_csv(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,z1\n1.0,abc\n2.0,3\n")
        code = run_command(["fit", "--data", str(path), "--z-cols", "z1", "--out", str(tmp_path / "out")])
        assert code == 2
        assert "kind=data" in capsys.readouterr().err

    def test_insufficient_observations(self, tmp_path, capsys):
        data, _ = gen_example1(15, error_law("sn"), np.random.default_rng(0))
        path = _write_frame(tmp_path / "small.csv", data)
        code = run_command([
            "fit", "--data", str(path), "--x-cols", "x2,x3", "--z-cols", "z1,z2,z3",
            "--knots", "6", "--out", str(tmp_path / "out"),
        ])
        assert code == 3
        err = capsys.readouterr().err
        assert "kind=insufficient_observations" in err
        assert "insufficient observations" in err

    def test_bad_tau(self, example1_csv, tmp_path):
        code = run_command(["fit", "--data", str(example1_csv), "--z-cols", "z1", "--tau", "1.5"])
        assert code == 1

    def test_fit_then_predict(self, example1_csv, run_file, tmp_path):
        out = tmp_path / "out"
        code = run_command([
            "fit", "--config", str(run_file), "--data", str(example1_csv),
            "--x-cols", "x2,x3", "--z-cols", "z1,z2,z3", "--out", str(out),
        ])
        assert code == 0
        for name in ("fit.json", "coeffs.csv", "curves.csv"):
            assert (out / name).is_file()
        curves = pd.read_csv(out / "curves.csv")
        assert list(curves.columns) == writers.CURVES_HEADER
        assert sorted(curves["component"].unique()) == [1, 2, 3]

        code = run_command([
            "predict", "--data", str(example1_csv), "--model", str(out / "fit.json"), "--out", str(out),
        ])
        assert code == 0
        predictions = pd.read_csv(out / "predictions.csv", float_precision="round_trip")
        assert list(predictions.columns) == ["row", "prediction"]
        assert len(predictions) == 200
        data = load_dataset(example1_csv, "y", ["x2", "x3"], ["z1", "z2", "z3"])
        expected = writers.load_fit_json(out / "fit.json").predict(data.x, data.z)
        assert np.array_equal(predictions["prediction"].to_numpy(), expected)

    def test_tune(self, example1_csv, run_file, tmp_path):
        run_file.write_text(QUICK_RUN + "\n[tuning]\ndelta_grid = 0.2, 0.5\nfolds = 3\n")
        out = tmp_path / "out"
        code = run_command([
            "tune", "--config", str(run_file), "--data", str(example1_csv),
            "--x-cols", "x2,x3", "--z-cols", "z1,z2,z3", "--out", str(out),
        ])
        assert code == 0
        table = pd.read_csv(out / "tuning.csv")
        assert list(table.columns) == writers.TUNING_HEADER
        assert len(table) == 2

    def test_simulate_is_reproducible(self, run_file, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run_command([
                "simulate", "--config", str(run_file), "--example", "1", "--n", "120",
                "--replications", "2", "--seed", "7", "--out", str(out),
            ])
            assert code == 0
            outputs.append(((out / "simsummary.json").read_bytes(), (out / "simreport.csv").read_bytes()))
        assert outputs[0] == outputs[1]
        summary = json.loads(outputs[0][0])
        assert summary["n_successful"] == 2
        assert summary["design"]["n"] == 120

    @pytest.mark.slow
    def test_identify_noiseless(self, run_file, tmp_path):
        data, _ = gen_example3(300, 5, error_law("sn"), np.random.default_rng(6), sigma=0.0)
        path = _write_frame(tmp_path / "ex3.csv", data, ("x2", "x3", "x4"))
        out = tmp_path / "out"
        code = run_command([
            "identify", "--config", str(run_file), "--data", str(path),
            "--x-cols", "x2,x3,x4", "--z-cols", ",".join(f"z{k}" for k in range(1, 6)),
            "--alpha1", "0.02", "--alpha2", "0.1", "--out", str(out),
        ])
        assert code == 0
        structure = json.loads((out / "structure.json").read_text())
        assert structure["is_linear"] == [False, False, True, True]
        selection = json.loads((out / "selection.json").read_text())
        assert selection["alpha1"] == 0.02
