"""Bias/variance experiments over setups, learners, sample sizes and budgets.

Each cell trains one learner twice on two independent training draws of the
same size, predicts on a fixed test set and decomposes the error with
:func:`mse_bias_var`. Every seed is derived from the cell's coordinates with
``numpy.random.SeedSequence(root, spawn_key=...)`` so results do not depend
on worker count or execution order.

Seed streams:

* training data: ``(TRAIN, setup, n, rep, draw)``, shared by every learner and
  budget at the same coordinates;
* learner noise and split: ``(FIT, setup, learner, n, epsilon bits, rep, draw)``;
* test set: ``(TEST, setup)``.
"""

from __future__ import annotations

import asyncio
import functools
import logging
import math
import multiprocessing

from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import aiofiles
import numpy as np
import pandas as pd

from dp_cate.accountant import PrivacyBudget
from dp_cate.config import (
    DEFAULT_CORRELATION_SEED,
    DEFAULT_DELTA,
    DEFAULT_RATIOS,
    DEFAULT_TARGET_RANGE,
    DESK_HYPER,
    BoostingParams,
    Cell,
    ExperimentConfig,
    resolve_workers,
)
from dp_cate.data_models import FloatArray, LearnerKind, SetupId
from dp_cate.exceptions import DPCateError
from dp_cate.metalearn import fit_cate, predict_cate
from dp_cate.synthdata import generate, get_setup

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "setup",
    "learner",
    "n",
    "epsilon",
    "delta",
    "rep",
    "mse",
    "bias",
    "variance",
    "flag",
    "seed",
]
GROUP_COLUMNS = ["setup", "learner", "n", "epsilon"]
METRIC_COLUMNS = ["mse", "bias", "variance"]
SHAPE_COLUMNS = ["setup", "epsilon", "feature", "bin_lower", "bin_upper", "value"]

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"
PLOT_DATA_FILE = "plot_data.csv"
FAILURES_FILE = "failures.txt"

FLAG_FAILED = "failed"
FLAG_NEGATIVE_BIAS = "negative_bias"
FLAG_NEGATIVE_VARIANCE = "negative_variance"


class SeedStream(IntEnum):
    """First spawn-key entry separating the independent seed streams."""

    TRAIN = 0
    FIT = 1
    TEST = 2


@dataclass(frozen=True)
class MetricsRecord:
    """Outcome of one experiment cell; metrics are NaN for failed cells."""

    setup: SetupId
    learner: LearnerKind
    n: int
    epsilon: float
    delta: float
    rep: int
    mse: float
    bias: float
    variance: float
    flag: str = ""
    seed: int = 0
    error: str = field(default="", compare=False)

    @property
    def cell(self) -> Cell:
        return Cell(self.setup, self.learner, self.n, self.epsilon, self.rep)

    @property
    def failed(self) -> bool:
        return self.flag == FLAG_FAILED


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    """Per-cell records in canonical order plus the derived tables."""

    records: list[MetricsRecord]
    reps: int

    @functools.cached_property
    def frame(self) -> pd.DataFrame:
        return results_frame(self.records)

    @functools.cached_property
    def summary(self) -> pd.DataFrame:
        return summarize(self.frame)

    @property
    def failures(self) -> list[MetricsRecord]:
        return [record for record in self.records if record.failed]


def mse_bias_var(mse1: float, mse2: float, mse_avg: float) -> tuple[float, float, float]:
    """Two-model estimate of ``(mse, integrated squared bias, integrated variance)``.

    With two independent fits, the MSE of their average equals the squared
    bias plus half the variance, and each MSE equals bias plus variance, so
    ``bias = 2 mse_avg - mse`` and ``variance = mse - bias``. Either estimate
    may come out negative.
    """
    mse = (mse1 + mse2) / 2.0
    bias = 2.0 * mse_avg - mse
    return mse, bias, mse - bias


def metric_flag(bias: float, variance: float) -> str:
    flags = []
    if bias < 0:
        flags.append(FLAG_NEGATIVE_BIAS)
    if variance < 0:
        flags.append(FLAG_NEGATIVE_VARIANCE)
    return ";".join(flags)


def epsilon_key(epsilon: float) -> int:
    """Exact integer code of a float, for use in seed derivation."""
    return int(np.float64(epsilon).view(np.uint64))


def derive_seed(root: int, stream: SeedStream, *coordinates: int) -> int:
    sequence = np.random.SeedSequence(root, spawn_key=(int(stream), *coordinates))
    return int(sequence.generate_state(1)[0])


def _setup_index(setup: SetupId) -> int:
    return list(SetupId).index(setup)


def _learner_index(learner: LearnerKind) -> int:
    return list(LearnerKind).index(learner)


def training_seed(config: ExperimentConfig, cell: Cell, draw: int) -> int:
    return derive_seed(
        config.seed, SeedStream.TRAIN, _setup_index(cell.setup), cell.n, cell.rep, draw
    )


def fit_seed(config: ExperimentConfig, cell: Cell, draw: int) -> int:
    return derive_seed(
        config.seed,
        SeedStream.FIT,
        _setup_index(cell.setup),
        _learner_index(cell.learner),
        cell.n,
        epsilon_key(cell.epsilon),
        cell.rep,
        draw,
    )


@functools.lru_cache(maxsize=8)
def fixed_test_set(
    setup: SetupId, size: int, root: int, correlation_seed: int = DEFAULT_CORRELATION_SEED
) -> tuple[FloatArray, FloatArray]:
    """Fixed test covariates and true effects of a setup, cached per process."""
    spec = get_setup(setup, correlation_seed)
    seed = derive_seed(root, SeedStream.TEST, _setup_index(setup))
    simulated = generate(spec, size, seed)
    return simulated.x, simulated.tau


def cell_budget(epsilon: float, delta: float) -> PrivacyBudget | None:
    """Budget of every module of a cell; ``inf`` means non-private."""
    if not math.isfinite(epsilon):
        return None
    return PrivacyBudget.from_eps_delta(epsilon, delta)


def run_cell(cell: Cell, config: ExperimentConfig) -> MetricsRecord:
    """Train twice, predict on the test set and decompose the error.

    Failures of the learner stack are recorded as a ``failed`` row rather
    than raised.
    """
    spec = get_setup(cell.setup, config.correlation_seed)
    test_x, test_tau = fixed_test_set(
        cell.setup, config.test_size, config.seed, config.correlation_seed
    )
    draws = (0, 0) if config.identical_training else (0, 1)
    seed = fit_seed(config, cell, draws[0])
    try:
        budget = cell_budget(cell.epsilon, config.delta)
        predictions = []
        for draw in draws:
            simulated = generate(spec, cell.n, training_seed(config, cell, draw))
            model = fit_cate(
                simulated.observations,
                cell.learner,
                budget,
                config.ratios,
                config.hyper,
                fit_seed(config, cell, draw),
                trim=config.trim,
                target_range=config.target_range,
            )
            predictions.append(predict_cate(model, test_x))
    except DPCateError as error:
        logger.warning(f"Cell {cell} failed: {error}")
        return MetricsRecord(
            setup=cell.setup,
            learner=cell.learner,
            n=cell.n,
            epsilon=cell.epsilon,
            delta=config.delta,
            rep=cell.rep,
            mse=math.nan,
            bias=math.nan,
            variance=math.nan,
            flag=FLAG_FAILED,
            seed=seed,
            error=str(error),
        )
    first, second = predictions
    mse, bias, variance = mse_bias_var(
        float(np.mean((first - test_tau) ** 2)),
        float(np.mean((second - test_tau) ** 2)),
        float(np.mean(((first + second) / 2.0 - test_tau) ** 2)),
    )
    return MetricsRecord(
        setup=cell.setup,
        learner=cell.learner,
        n=cell.n,
        epsilon=cell.epsilon,
        delta=config.delta,
        rep=cell.rep,
        mse=mse,
        bias=bias,
        variance=variance,
        flag=metric_flag(bias, variance),
        seed=seed,
    )


ProgressCallback = Callable[[MetricsRecord], None]


async def run_experiment_async(
    config: ExperimentConfig,
    *,
    workers: int | None = None,
    on_record: ProgressCallback | None = None,
) -> ExperimentResult:
    """Run every cell of ``config`` on a pool of worker processes.

    One worker runs the cells sequentially in a thread. Output is sorted into
    canonical cell order whatever the completion order.
    """
    cells = config.cells()
    if not cells:
        logger.warning("The experiment grid is empty; nothing to run")
        return ExperimentResult(records=[], reps=config.reps)
    workers = resolve_workers(config, workers)
    logger.info(f"Running {len(cells)} cells on {workers} worker(s)")

    records: list[MetricsRecord] = []
    if workers == 1:
        for cell in cells:
            record = await asyncio.to_thread(run_cell, cell, config)
            records.append(record)
            if on_record is not None:
                on_record(record)
    else:
        loop = asyncio.get_running_loop()
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            futures = [
                loop.run_in_executor(pool, run_cell, cell, config) for cell in cells
            ]
            for future in asyncio.as_completed(futures):
                record = await future
                records.append(record)
                if on_record is not None:
                    on_record(record)

    order = {cell: index for index, cell in enumerate(cells)}
    records.sort(key=lambda record: order[record.cell])
    failed = sum(record.failed for record in records)
    if failed:
        logger.warning(f"{failed} of {len(records)} cells failed")
    return ExperimentResult(records=records, reps=config.reps)


def run_experiment(
    config: ExperimentConfig, *, workers: int | None = None
) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, workers=workers))


def results_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    rows = [
        {column: value for column, value in asdict(record).items() if column != "error"}
        for record in records
    ]
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    frame["setup"] = frame["setup"].astype(str)
    frame["learner"] = frame["learner"].astype(str)
    return frame


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-(setup, learner, n, epsilon) means of the metrics over reps.

    Failed reps are excluded from the means and counted in ``failed``.
    """
    columns = [*GROUP_COLUMNS, "delta", "reps", "failed"] + [
        f"{metric}_mean" for metric in METRIC_COLUMNS
    ]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby(GROUP_COLUMNS, sort=False)
    summary = grouped.agg(
        delta=("delta", "first"),
        reps=("mse", "count"),
        failed=("flag", lambda flags: int((flags == FLAG_FAILED).sum())),
        mse_mean=("mse", "mean"),
        bias_mean=("bias", "mean"),
        variance_mean=("variance", "mean"),
    ).reset_index()
    return summary[columns]


def plot_data(summary: pd.DataFrame) -> pd.DataFrame:
    """Long-format ``setup, learner, n, epsilon, metric, value`` table."""
    value_columns = [f"{metric}_mean" for metric in METRIC_COLUMNS]
    long = summary.melt(
        id_vars=GROUP_COLUMNS,
        value_vars=value_columns,
        var_name="metric",
        value_name="value",
    )
    long["metric"] = long["metric"].str.removesuffix("_mean")
    return long


def format_failures(records: Sequence[MetricsRecord]) -> str:
    lines = [
        f"setup={record.setup} learner={record.learner} n={record.n} "
        f"epsilon={record.epsilon:g} rep={record.rep}: {record.error}"
        for record in records
        if record.failed
    ]
    return "".join(f"{line}\n" for line in lines)


async def _write_text(path: Path, text: str) -> None:
    async with aiofiles.open(path, "w", encoding="utf-8") as handle:
        await handle.write(text)


async def write_outputs_async(result: ExperimentResult, out_dir: Path) -> list[Path]:
    """Write results, summary, plot data and failures into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        out_dir / RESULTS_FILE: result.frame.to_csv(index=False),
        out_dir / SUMMARY_FILE: result.summary.to_csv(index=False),
        out_dir / PLOT_DATA_FILE: plot_data(result.summary).to_csv(index=False),
        out_dir / FAILURES_FILE: format_failures(result.records),
    }
    await asyncio.gather(*(_write_text(path, text) for path, text in outputs.items()))
    for path in outputs:
        logger.info(f"Wrote {path}")
    return list(outputs)


def shape_sweep(
    setup: SetupId | str,
    epsilons: Sequence[float],
    n: int,
    *,
    seed: int = 0,
    feature: int = 0,
    delta: float = DEFAULT_DELTA,
    hyper: BoostingParams = DESK_HYPER,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    target_range: tuple[float, float] = DEFAULT_TARGET_RANGE,
    correlation_seed: int = DEFAULT_CORRELATION_SEED,
) -> pd.DataFrame:
    """Second-stage DR shape of one feature at each budget, as a long table.

    Every budget is fitted on the same training draw so that only the noise
    differs between the curves.
    """
    setup = SetupId(setup)
    simulated = generate(get_setup(setup, correlation_seed), n, seed)
    rows = []
    for epsilon in epsilons:
        model = fit_cate(
            simulated.observations,
            LearnerKind.DR,
            cell_budget(epsilon, delta),
            ratios,
            hyper,
            seed,
            target_range=target_range,
        )
        assert model.second_stage is not None
        shape = model.second_stage.shapes[feature]
        name = model.second_stage.feature_names[feature]
        rows.extend(
            {
                "setup": str(setup),
                "epsilon": epsilon,
                "feature": name,
                "bin_lower": lower,
                "bin_upper": upper,
                "value": value,
            }
            for lower, upper, value in zip(
                shape.edges[:-1], shape.edges[1:], shape.values, strict=True
            )
        )
    return pd.DataFrame(rows, columns=SHAPE_COLUMNS)
