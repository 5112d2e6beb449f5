"""Tests for the dp-cate command line."""

import io
import json
import math

import numpy as np
import pandas as pd
import pytest

from click.testing import CliRunner

from dp_cate import __version__
from dp_cate.cli import main
from dp_cate.config import DESK_HYPER, WORKERS_ENV_VAR
from dp_cate.data_models import SetupId
from dp_cate.dpgam import loads_shapes
from dp_cate.synthdata import generate, get_setup
from dp_cate.tradeoff import EpsDelta, make_eps_delta


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def training_csv(tmp_path):
    simulated = generate(get_setup(SetupId.B), 400, seed=3)
    path = tmp_path / "train.csv"
    simulated.observations.to_frame(tau=simulated.tau).to_csv(path, index=False)
    return path


@pytest.fixture
def test_csv(tmp_path):
    simulated = generate(get_setup(SetupId.B), 25, seed=4)
    path = tmp_path / "test.csv"
    simulated.observations.to_frame().drop(columns=["y", "t"]).to_csv(path, index=False)
    return path


@pytest.mark.unit
def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


@pytest.mark.unit
class TestTradeoffCommand:
    def test_composes_to_weakest_budget(self, runner):
        result = runner.invoke(
            main, ["tradeoff", "--eps-delta", "1,1e-5", "--eps-delta", "2,1e-5"]
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(io.StringIO(result.stdout))
        assert list(frame.columns) == ["alpha", "beta"]
        expected = make_eps_delta(EpsDelta(2.0, 1e-5))
        np.testing.assert_allclose(frame["beta"], expected(frame["alpha"]), atol=1e-12)

    def test_writes_csv_file(self, runner, tmp_path):
        out = tmp_path / "curve.csv"
        result = runner.invoke(
            main, ["tradeoff", "--mu", "1.0", "--grid-size", "101", "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(out)
        assert frame["alpha"].iloc[0] == 0.0
        assert frame["alpha"].iloc[-1] == 1.0

    def test_gdp_conversion(self, runner):
        result = runner.invoke(main, ["tradeoff", "--eps-delta", "4,1e-5", "--to-gdp"])
        assert result.exit_code == 0, result.output
        assert "mu=" in result.stderr

    def test_needs_a_component(self, runner):
        result = runner.invoke(main, ["tradeoff"])
        assert result.exit_code == 2

    def test_rejects_malformed_pair(self, runner):
        result = runner.invoke(main, ["tradeoff", "--eps-delta", "1"])
        assert result.exit_code == 2

    def test_rejects_invalid_budget(self, runner):
        result = runner.invoke(main, ["tradeoff", "--eps-delta", "1,2"])
        assert result.exit_code == 1
        assert "delta" in result.output


@pytest.mark.unit
def test_simulate_writes_rows(runner, tmp_path):
    out = tmp_path / "sim.csv"
    result = runner.invoke(
        main,
        ["simulate", "--setup", "D", "--n", "50", "--seed", "2", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert len(frame) == 50
    assert list(frame.columns) == [
        "y", "t", "x1", "x2", "x3", "x4", "x5", "x6", "tau_true"
    ]
    assert set(frame["t"]) <= {0, 1}


@pytest.mark.unit
class TestFitCommand:
    def test_private_s_learner(self, runner, tmp_path, training_csv, test_csv):
        out_dir = tmp_path / "fit"
        result = runner.invoke(
            main,
            [
                "fit", "--learner", "s", "--data", str(training_csv),
                "--out-dir", str(out_dir), "--epsilon", "4", "--test", str(test_csv),
                "--rounds", "2", "--bins", "8",
            ],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out_dir / "privacy.json").read_text(encoding="utf-8"))
        assert report["learner"] == "S"
        assert report["modules"] == ["response"]
        assert report["certified_epsilon"] == pytest.approx(4.0, abs=1e-6)
        assert report["release_count"] == 7 + 2 * 7
        model = loads_shapes((out_dir / "shapes" / "response.json").read_text())
        assert model.num_features == 7
        predictions = pd.read_csv(out_dir / "predictions.csv")
        assert len(predictions) == 25
        assert predictions["tau_hat"].nunique() == 1

    def test_non_private_dr_learner(self, runner, tmp_path, training_csv):
        out_dir = tmp_path / "fit"
        result = runner.invoke(
            main, ["fit", "--data", str(training_csv), "--out-dir", str(out_dir)]
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out_dir / "privacy.json").read_text(encoding="utf-8"))
        assert report["certified_epsilon"] is None
        assert report["release_count"] == 0
        names = sorted(path.stem for path in (out_dir / "shapes").iterdir())
        assert names == ["cate", "propensity", "response"]
        assert not (out_dir / "predictions.csv").exists()

    def test_test_file_needs_feature_columns(self, runner, tmp_path, training_csv):
        bad = tmp_path / "bad.csv"
        bad.write_text("x1,x2\n0.1,0.2\n", encoding="utf-8")
        result = runner.invoke(
            main,
            [
                "fit", "--learner", "s", "--data", str(training_csv),
                "--out-dir", str(tmp_path / "fit"), "--test", str(bad),
                "--rounds", "1", "--bins", "4",
            ],
        )
        assert result.exit_code == 1
        assert "x3" in result.output

    def test_rejects_bad_hyperparameters(self, runner, tmp_path, training_csv):
        result = runner.invoke(
            main,
            [
                "fit", "--data", str(training_csv), "--out-dir", str(tmp_path / "fit"),
                "--learning-rate", "3",
            ],
        )
        assert result.exit_code == 1


@pytest.mark.unit
class TestExperimentCommand:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "grid.json"
        path.write_text(
            json.dumps(
                {
                    "setups": ["C"],
                    "learners": ["S"],
                    "sample_sizes": [200],
                    "epsilons": [4.0, "nonprivate"],
                    "reps": 1,
                    "test_size": 500,
                    "hyper": {"rounds": 2, "learning_rate": 0.5, "num_bins": 8},
                }
            ),
            encoding="utf-8",
        )
        return path

    def test_runs_grid(self, runner, tmp_path, config_file, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)
        out_dir = tmp_path / "results"
        result = runner.invoke(
            main,
            [
                "experiment", "--config", str(config_file),
                "--out-dir", str(out_dir), "--workers", "1",
            ],
        )
        assert result.exit_code == 0, result.output
        results = pd.read_csv(out_dir / "results.csv")
        assert len(results) == 2
        assert math.isinf(results["epsilon"].iloc[1])
        summary = pd.read_csv(out_dir / "summary.csv")
        assert len(summary) == 2
        assert (out_dir / "plot_data.csv").exists()
        assert (out_dir / "failures.txt").read_text(encoding="utf-8") == ""

    def test_config_and_full_grid_conflict(self, runner, config_file):
        result = runner.invoke(
            main, ["experiment", "--config", str(config_file), "--full-grid"]
        )
        assert result.exit_code == 2

    def test_invalid_config(self, runner, tmp_path):
        path = tmp_path / "grid.json"
        path.write_text('{"reps": -1}', encoding="utf-8")
        result = runner.invoke(main, ["experiment", "--config", str(path)])
        assert result.exit_code == 1
        assert "invalid config" in result.output


@pytest.mark.unit
class TestShapesCommand:
    def test_sweep(self, runner, tmp_path):
        out = tmp_path / "shapes.csv"
        result = runner.invoke(
            main,
            [
                "shapes", "--setup", "C", "--epsilon", "4", "--epsilon", "inf",
                "--n", "400", "--feature", "2", "--out", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(out)
        assert set(frame["feature"]) == {"x2"}
        assert len(frame) == 2 * DESK_HYPER.num_bins

    def test_rejects_missing_feature(self, runner, tmp_path):
        result = runner.invoke(
            main,
            [
                "shapes", "--feature", "7", "--n", "400",
                "--out", str(tmp_path / "s.csv"),
            ],
        )
        assert result.exit_code == 2
