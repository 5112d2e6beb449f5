"""Tests for the bias/variance experiment harness."""

import itertools
import math

import numpy as np
import pandas as pd
import pytest

from dp_cate.config import (
    DESK_HYPER,
    WORKERS_ENV_VAR,
    BoostingParams,
    Cell,
    ExperimentConfig,
)
from dp_cate.data_models import LearnerKind, SetupId
from dp_cate.harness import (
    FAILURES_FILE,
    FLAG_FAILED,
    FLAG_NEGATIVE_BIAS,
    FLAG_NEGATIVE_VARIANCE,
    PLOT_DATA_FILE,
    RESULT_COLUMNS,
    RESULTS_FILE,
    SHAPE_COLUMNS,
    SUMMARY_FILE,
    MetricsRecord,
    SeedStream,
    cell_budget,
    derive_seed,
    epsilon_key,
    fit_seed,
    fixed_test_set,
    format_failures,
    metric_flag,
    mse_bias_var,
    plot_data,
    results_frame,
    run_cell,
    run_experiment,
    run_experiment_async,
    shape_sweep,
    summarize,
    training_seed,
    write_outputs_async,
)


@pytest.fixture(autouse=True)
def _single_worker(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV_VAR, raising=False)


def record(**overrides) -> MetricsRecord:
    values = {
        "setup": SetupId.C,
        "learner": LearnerKind.S,
        "n": 200,
        "epsilon": 4.0,
        "delta": 1e-5,
        "rep": 0,
        "mse": 0.5,
        "bias": 0.2,
        "variance": 0.3,
    }
    values.update(overrides)
    return MetricsRecord(**values)


@pytest.mark.unit
class TestDecomposition:
    def test_two_model_identity(self):
        assert mse_bias_var(2.0, 4.0, 2.0) == (3.0, 1.0, 2.0)

    def test_matches_known_bias_and_variance(self):
        rng = np.random.default_rng(0)
        truth = np.zeros(200_000)
        bias = 0.3
        first = bias + rng.normal(0.0, 0.5, truth.size)
        second = bias + rng.normal(0.0, 0.5, truth.size)
        mse, bias_sq, variance = mse_bias_var(
            float(np.mean((first - truth) ** 2)),
            float(np.mean((second - truth) ** 2)),
            float(np.mean(((first + second) / 2 - truth) ** 2)),
        )
        assert mse == pytest.approx(0.34, abs=0.01)
        assert bias_sq == pytest.approx(0.09, abs=0.01)
        assert variance == pytest.approx(0.25, abs=0.01)

    def test_matches_enumeration_of_two_linear_predictors(self):
        points = np.array([0.0, 1.0, 2.0])
        truth = points**2
        predictors = np.vstack([1.0 + 2.0 * points, 0.5 - points])
        # Both fits are drawn independently and uniformly from the two lines.
        estimates = [
            mse_bias_var(
                float(np.mean((first - truth) ** 2)),
                float(np.mean((second - truth) ** 2)),
                float(np.mean(((first + second) / 2 - truth) ** 2)),
            )
            for first, second in itertools.product(predictors, repeat=2)
        ]
        bias = np.mean((predictors.mean(axis=0) - truth) ** 2)
        variance = np.mean(predictors.var(axis=0))
        assert bias == pytest.approx(91 / 48, rel=1e-12)
        assert variance == pytest.approx(219 / 48, rel=1e-12)
        np.testing.assert_allclose(
            np.mean(estimates, axis=0), [bias + variance, bias, variance], rtol=1e-12
        )

    def test_flags(self):
        assert metric_flag(0.1, 0.2) == ""
        assert metric_flag(-0.1, 0.2) == FLAG_NEGATIVE_BIAS
        both = f"{FLAG_NEGATIVE_BIAS};{FLAG_NEGATIVE_VARIANCE}"
        assert metric_flag(-0.1, -0.2) == both


@pytest.mark.unit
class TestSeeds:
    def test_epsilon_key_is_exact(self):
        assert epsilon_key(4.0) != epsilon_key(math.nextafter(4.0, 5.0))
        assert epsilon_key(math.inf) == epsilon_key(float("inf"))

    def test_streams_are_independent(self):
        train = derive_seed(1, SeedStream.TRAIN, 0, 5)
        assert train != derive_seed(1, SeedStream.FIT, 0, 5)
        assert train == derive_seed(1, SeedStream.TRAIN, 0, 5)
        assert 0 <= derive_seed(7, SeedStream.TEST, 2) < 2**32

    def test_training_draws_are_shared_across_learners_and_budgets(self, tiny_config):
        dr = Cell(SetupId.C, LearnerKind.DR, 200, 1.0, 0)
        s = Cell(SetupId.C, LearnerKind.S, 200, math.inf, 0)
        assert training_seed(tiny_config, dr, 0) == training_seed(tiny_config, s, 0)
        assert training_seed(tiny_config, dr, 0) != training_seed(tiny_config, dr, 1)
        assert fit_seed(tiny_config, dr, 0) != fit_seed(tiny_config, s, 0)

    def test_test_set_is_fixed(self):
        x, tau = fixed_test_set(SetupId.C, 100, 5)
        again, _ = fixed_test_set(SetupId.C, 100, 5)
        assert x is again
        assert x.shape == (100, 6)
        np.testing.assert_array_equal(tau, 1.0)

    def test_cell_budget(self):
        assert cell_budget(math.inf, 1e-5) is None
        assert cell_budget(2.0, 1e-5).epsilon == 2.0


@pytest.mark.unit
class TestRunCell:
    def test_records_metrics(self, tiny_config):
        cell = tiny_config.cells()[0]
        result = run_cell(cell, tiny_config)
        assert result.cell == cell
        assert not result.failed
        assert result.mse == pytest.approx(result.bias + result.variance)
        assert result.seed == fit_seed(tiny_config, cell, 0)

    def test_identical_training_draws(self, tiny_config):
        config = tiny_config.model_copy(update={"identical_training": True})
        cell = config.cells()[1]
        result = run_cell(cell, config)
        # Same data and a deterministic non-private fit give identical models.
        assert result.variance == pytest.approx(0.0, abs=1e-12)

    def test_failure_becomes_a_row(self):
        config = ExperimentConfig(
            setups=(SetupId.C,),
            learners=(LearnerKind.DR,),
            sample_sizes=(20,),
            epsilons=(4.0,),
            reps=1,
            test_size=100,
            workers=1,
        )
        result = run_cell(config.cells()[0], config)
        assert result.failed
        assert result.flag == FLAG_FAILED
        assert math.isnan(result.mse)
        assert "fewer than" in result.error


@pytest.mark.unit
class TestExperiment:
    def test_runs_every_cell_in_order(self, tiny_config):
        result = run_experiment(tiny_config)
        assert [record.cell for record in result.records] == tiny_config.cells()
        assert list(result.frame.columns) == RESULT_COLUMNS
        assert list(result.frame["learner"]) == ["S", "S"]
        assert result.failures == []

    @pytest.mark.asyncio
    async def test_progress_callback(self, tiny_config):
        seen: list[MetricsRecord] = []
        result = await run_experiment_async(tiny_config, on_record=seen.append)
        assert len(seen) == len(result.records) == 2

    def test_empty_grid(self):
        config = ExperimentConfig(sample_sizes=(), workers=1)
        result = run_experiment(config)
        assert result.records == []
        assert result.summary.empty

    def test_deterministic(self, tiny_config):
        first = run_experiment(tiny_config).frame
        second = run_experiment(tiny_config).frame
        pd.testing.assert_frame_equal(first, second)

    @pytest.mark.slow
    @pytest.mark.integration
    def test_worker_count_does_not_change_results(self, tiny_config):
        learners = (LearnerKind.S, LearnerKind.R)
        config = tiny_config.model_copy(update={"learners": learners})
        serial = run_experiment(config, workers=1).frame
        parallel = run_experiment(config, workers=2).frame
        pd.testing.assert_frame_equal(serial, parallel)


@pytest.mark.unit
class TestTables:
    def test_summary_excludes_failed_reps(self):
        failed = record(
            rep=2, mse=math.nan, bias=math.nan, variance=math.nan, flag=FLAG_FAILED
        )
        frame = results_frame(
            [record(rep=0), record(rep=1, mse=0.7, bias=0.3, variance=0.4), failed]
        )
        summary = summarize(frame)
        row = summary.iloc[0]
        assert row["reps"] == 2
        assert row["failed"] == 1
        assert row["mse_mean"] == pytest.approx(0.6)
        assert row["bias_mean"] == pytest.approx(0.25)

    def test_plot_data_is_long(self):
        frame = results_frame([record()])
        long = plot_data(summarize(frame))
        assert list(long["metric"]) == ["mse", "bias", "variance"]
        assert list(long["value"]) == [0.5, 0.2, 0.3]

    def test_format_failures(self):
        records = [record(), record(rep=3, flag=FLAG_FAILED, error="boom")]
        assert format_failures(records) == (
            "setup=C learner=S n=200 epsilon=4 rep=3: boom\n"
        )

    @pytest.mark.asyncio
    async def test_writes_all_outputs(self, tiny_config, tmp_path):
        result = await run_experiment_async(tiny_config)
        paths = await write_outputs_async(result, tmp_path / "out")
        names = sorted(path.name for path in paths)
        expected = [RESULTS_FILE, SUMMARY_FILE, PLOT_DATA_FILE, FAILURES_FILE]
        assert names == sorted(expected)
        results = pd.read_csv(tmp_path / "out" / RESULTS_FILE)
        assert list(results.columns) == RESULT_COLUMNS
        assert len(results) == 2
        assert (tmp_path / "out" / FAILURES_FILE).read_text(encoding="utf-8") == ""


@pytest.mark.unit
def test_shape_sweep_table():
    hyper = BoostingParams(rounds=2, learning_rate=0.5, num_bins=8, clip=3.0)
    table = shape_sweep(SetupId.C, [4.0, math.inf], 400, seed=1, hyper=hyper)
    assert list(table.columns) == SHAPE_COLUMNS
    assert len(table) == 2 * 8
    assert set(table["feature"]) == {"x1"}
    assert table["bin_lower"].min() == -5.0
    assert table["bin_upper"].max() == 5.0


def _grid(setups, learners, sizes, epsilons, reps, seed=1):
    return ExperimentConfig(
        setups=setups,
        learners=learners,
        sample_sizes=sizes,
        epsilons=epsilons,
        reps=reps,
        test_size=5000,
        seed=seed,
        workers=1,
        hyper=DESK_HYPER,
    )


def _mean(summary: pd.DataFrame, column: str, **where) -> float:
    mask = np.ones(len(summary), dtype=bool)
    for key, value in where.items():
        mask &= summary[key] == value
    return float(summary.loc[mask, column].mean())


@pytest.mark.slow
@pytest.mark.integration
def test_privacy_noise_mostly_inflates_variance():
    config = _grid((SetupId.A, SetupId.C), (LearnerKind.DR,), (2000,), (1.0, 16.0), 30)
    summary = run_experiment(config).summary
    for setup in ("A", "C"):
        variance = {
            epsilon: _mean(summary, "variance_mean", setup=setup, epsilon=epsilon)
            for epsilon in (1.0, 16.0)
        }
        bias = {
            epsilon: _mean(summary, "bias_mean", setup=setup, epsilon=epsilon)
            for epsilon in (1.0, 16.0)
        }
        assert variance[1.0] >= 3.0 * variance[16.0]
        assert bias[16.0] > 0.0
        assert bias[1.0] <= 3.0 * bias[16.0]


@pytest.mark.slow
@pytest.mark.integration
def test_simple_learner_wins_under_tight_budgets_and_loses_under_loose_ones():
    learners = (LearnerKind.DR, LearnerKind.S)
    setups = (SetupId.A, SetupId.B, SetupId.D)
    tight = run_experiment(_grid(setups, learners, (500,), (1.0,), 10)).summary
    loose = run_experiment(_grid(setups, learners, (8000,), (16.0,), 10)).summary
    for setup in ("A", "B", "D"):
        assert _mean(tight, "mse_mean", setup=setup, learner="S") <= _mean(
            tight, "mse_mean", setup=setup, learner="DR"
        )
        assert _mean(loose, "mse_mean", setup=setup, learner="DR") <= _mean(
            loose, "mse_mean", setup=setup, learner="S"
        )
