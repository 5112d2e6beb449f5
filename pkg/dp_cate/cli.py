"""Command line interface for private CATE estimation.

Subcommands cover the trade-off calculator, the synthetic generators, a
single learner fit on a CSV file, the bias/variance experiment and the
shape-function sweep.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math

from pathlib import Path

import aiofiles
import click
import numpy as np
import pandas as pd

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn
from rich.table import Table

from dp_cate import __version__
from dp_cate.accountant import PrivacyBudget
from dp_cate.config import (
    DEFAULT_DELTA,
    DESK_HYPER,
    BoostingParams,
    ExperimentConfig,
)
from dp_cate.data_models import LearnerKind, ObservationSet, SetupId
from dp_cate.dpgam import dumps_shapes
from dp_cate.exceptions import DPCateError
from dp_cate.harness import (
    MetricsRecord,
    run_experiment_async,
    shape_sweep,
    write_outputs_async,
)
from dp_cate.metalearn import CateModel, fit_cate, predict_cate
from dp_cate.synthdata import generate, get_setup
from dp_cate.tradeoff import (
    DEFAULT_GAUSSIAN_GRID,
    EpsDelta,
    TradeoffCurve,
    certified_epsilon,
    compose_parallel,
    make_eps_delta,
    make_gaussian,
)

logger = logging.getLogger(__name__)

console = Console()
err_console = Console(stderr=True)

PRIVACY_REPORT_FILE = "privacy.json"
PREDICTIONS_FILE = "predictions.csv"


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _parse_pair(value: str, option: str) -> tuple[float, float]:
    try:
        first, second = (float(part) for part in value.split(","))
    except ValueError as error:
        raise click.BadParameter(f"expected two comma-separated numbers, got {value!r}",
                                 param_hint=option) from error
    return first, second


async def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf-8") as handle:
        await handle.write(text)


def _curve_frame(curve: TradeoffCurve) -> pd.DataFrame:
    return pd.DataFrame({"alpha": curve.xs, "beta": curve.ys})


@click.group()
@click.version_option(version=__version__, prog_name="dp-cate")
@click.option("-v", "--verbose", count=True, help="Log more detail (-v info, -vv debug)")
def main(verbose: int) -> None:
    """Differentially private CATE estimation with additive meta-learners.

    Fit DR-, R- and S-learners under (epsilon, delta) budgets, compose their
    privacy guarantees and run bias/variance experiments on synthetic setups.
    """
    _configure_logging(verbose)


@main.command()
@click.option("--eps-delta", "eps_deltas", multiple=True,
              help='Component (epsilon, delta) budget as "EPS,DELTA"; repeatable')
@click.option("--mu", "mus", multiple=True, type=float,
              help="Component Gaussian-DP parameter; repeatable")
@click.option("--grid-size", default=DEFAULT_GAUSSIAN_GRID, show_default=True,
              help="Grid nodes of each Gaussian curve")
@click.option("--delta", default=DEFAULT_DELTA, show_default=True,
              help="Delta at which to certify the composed epsilon")
@click.option("--to-gdp", is_flag=True, help="Also print the Gaussian-DP mu of each (epsilon, delta)")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write composed breakpoints to this CSV (default: stdout)")
def tradeoff(
    eps_deltas: tuple[str, ...],
    mus: tuple[float, ...],
    grid_size: int,
    delta: float,
    to_gdp: bool,
    out: Path | None,
) -> None:
    """Parallel composition of (epsilon, delta) and Gaussian curves."""
    asyncio.run(_tradeoff_async(eps_deltas, mus, grid_size, delta, to_gdp, out))


async def _tradeoff_async(
    eps_deltas: tuple[str, ...],
    mus: tuple[float, ...],
    grid_size: int,
    delta: float,
    to_gdp: bool,
    out: Path | None,
) -> None:
    if not eps_deltas and not mus:
        raise click.UsageError("give at least one --eps-delta or --mu")
    pairs = [_parse_pair(value, "--eps-delta") for value in eps_deltas]
    try:
        curves = [make_eps_delta(EpsDelta(epsilon, d)) for epsilon, d in pairs]
        curves += [make_gaussian(mu, grid_size) for mu in mus]
        composed = compose_parallel(curves)
        epsilon = certified_epsilon(composed, delta)
        conversions = [
            (epsilon_i, delta_i, PrivacyBudget.from_eps_delta(epsilon_i, delta_i).mu)
            for epsilon_i, delta_i in pairs
        ] if to_gdp else []
    except DPCateError as error:
        raise click.ClickException(str(error)) from error

    table = Table(title="Composed trade-off curve")
    table.add_column("Components", justify="right")
    table.add_column("Breakpoints", justify="right")
    table.add_column(f"Certified epsilon at delta={delta:g}", justify="right")
    table.add_row(str(len(curves)), str(composed.xs.size), f"{epsilon:.6g}")
    err_console.print(table)
    for epsilon_i, delta_i, mu in conversions:
        err_console.print(f"(epsilon={epsilon_i:g}, delta={delta_i:g}) -> mu={mu:.6g}")

    text = _curve_frame(composed).to_csv(index=False)
    if out is None:
        click.echo(text, nl=False)
    else:
        await _write_text(out, text)
        err_console.print(f"[green]Wrote {out}[/green]")


@main.command()
@click.option("--setup", "setup_id", type=click.Choice([s.value for s in SetupId]),
              required=True, help="Simulation setup")
@click.option("--n", "n", type=click.IntRange(min=1), required=True, help="Number of rows")
@click.option("--seed", default=0, show_default=True, help="Generator seed")
@click.option("--correlation-seed", default=None, type=int,
              help="Seed of the Setup E correlation matrix")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Output CSV (y, t, x1..x6, tau_true)")
def simulate(
    setup_id: str, n: int, seed: int, correlation_seed: int | None, out: Path
) -> None:
    """Draw a synthetic dataset with its true effects."""
    asyncio.run(_simulate_async(setup_id, n, seed, correlation_seed, out))


async def _simulate_async(
    setup_id: str, n: int, seed: int, correlation_seed: int | None, out: Path
) -> None:
    try:
        spec = (
            get_setup(setup_id)
            if correlation_seed is None
            else get_setup(setup_id, correlation_seed)
        )
        simulated = generate(spec, n, seed)
    except DPCateError as error:
        raise click.ClickException(str(error)) from error
    frame = simulated.observations.to_frame(tau=simulated.tau)
    await _write_text(out, frame.to_csv(index=False))
    err_console.print(f"[green]Wrote {n} rows of setup {setup_id} to {out}[/green]")


def _privacy_report(model: CateModel, delta: float) -> dict[str, object]:
    composed = model.composed_privacy
    epsilon = certified_epsilon(composed, delta)
    return {
        "learner": model.kind.value,
        "modules": sorted(model.module_curves),
        "release_count": model.release_count,
        "delta": delta,
        "certified_epsilon": epsilon if math.isfinite(epsilon) else None,
        "breakpoints": {"alpha": composed.xs.tolist(), "beta": composed.ys.tolist()},
    }


@main.command()
@click.option("--learner", type=click.Choice(["dr", "r", "s"], case_sensitive=False),
              default="dr", show_default=True, help="Meta-learner")
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="Training CSV with columns y, t, x1..xd")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path),
              required=True, help="Directory for shapes, privacy report and predictions")
@click.option("--epsilon", type=float, default=None,
              help="Per-module epsilon (omit for a non-private fit)")
@click.option("--delta", default=DEFAULT_DELTA, show_default=True, help="Per-module delta")
@click.option("--seed", default=0, show_default=True, help="Seed of the split and noise")
@click.option("--test", "test_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="CSV of rows x1..xd to predict the effect on")
@click.option("--bounds", default="-5,5", show_default=True,
              help='Public feature bounds "LO,HI" shared by every feature')
@click.option("--rounds", type=int, default=DESK_HYPER.rounds, show_default=True)
@click.option("--learning-rate", type=float, default=DESK_HYPER.learning_rate, show_default=True)
@click.option("--bins", type=int, default=DESK_HYPER.num_bins, show_default=True)
@click.option("--clip", type=float, default=DESK_HYPER.clip, show_default=True)
def fit(
    learner: str,
    data: Path,
    out_dir: Path,
    epsilon: float | None,
    delta: float,
    seed: int,
    test_path: Path | None,
    bounds: str,
    rounds: int,
    learning_rate: float,
    bins: int,
    clip: float,
) -> None:
    """Fit a private CATE learner on a CSV file."""
    asyncio.run(
        _fit_async(
            LearnerKind(learner.upper()), data, out_dir, epsilon, delta, seed,
            test_path, _parse_pair(bounds, "--bounds"),
            (rounds, learning_rate, bins, clip),
        )
    )


async def _fit_async(
    kind: LearnerKind,
    data: Path,
    out_dir: Path,
    epsilon: float | None,
    delta: float,
    seed: int,
    test_path: Path | None,
    bounds: tuple[float, float],
    hyper_values: tuple[int, float, int, float],
) -> None:
    rounds, learning_rate, bins, clip = hyper_values
    try:
        hyper = BoostingParams(
            rounds=rounds, learning_rate=learning_rate, num_bins=bins, clip=clip
        )
        frame = await asyncio.to_thread(pd.read_csv, data)
        observations = ObservationSet.from_frame(frame, bounds=bounds, num_bins=bins)
        budget = None if epsilon is None else PrivacyBudget.from_eps_delta(epsilon, delta)
        model = await asyncio.to_thread(
            fit_cate, observations, kind, budget, hyper=hyper, seed=seed
        )
        report = _privacy_report(model, delta)
        predictions = None
        if test_path is not None:
            test_frame = await asyncio.to_thread(pd.read_csv, test_path)
            columns = [f"x{index + 1}" for index in range(observations.d)]
            missing = sorted(set(columns) - set(test_frame.columns))
            if missing:
                raise click.ClickException(f"test file lacks columns {missing}")
            predictions = test_frame[columns].copy()
            predictions["tau_hat"] = predict_cate(
                model, test_frame[columns].to_numpy(dtype=np.float64)
            )
    except (DPCateError, ValidationError) as error:
        raise click.ClickException(str(error)) from error
    except (OSError, pd.errors.ParserError) as error:
        raise click.ClickException(f"cannot read data: {error}") from error

    writes = [
        _write_text(out_dir / "shapes" / f"{name}.json", dumps_shapes(additive))
        for name, additive in model.modules().items()
    ]
    writes.append(
        _write_text(out_dir / PRIVACY_REPORT_FILE, json.dumps(report, indent=2) + "\n")
    )
    if predictions is not None:
        writes.append(
            _write_text(out_dir / PREDICTIONS_FILE, predictions.to_csv(index=False))
        )
    await asyncio.gather(*writes)

    table = Table(title=f"{kind.value}-learner fit")
    table.add_column("Property")
    table.add_column("Value", justify="right")
    table.add_row("Rows", str(observations.n))
    table.add_row("Modules", ", ".join(sorted(model.modules())))
    table.add_row("Noisy releases", str(model.release_count))
    certified = report["certified_epsilon"]
    table.add_row(
        f"Certified epsilon at delta={delta:g}",
        "non-private" if certified is None else f"{certified:.6g}",
    )
    if model.constant is not None:
        table.add_row("Constant effect", f"{model.constant:.6g}")
    console.print(table)
    console.print(f"[green]Outputs written to {out_dir}[/green]")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="JSON experiment configuration")
@click.option("--full-grid", is_flag=True, help="Run the complete grid (hours)")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path),
              default=Path("results"), show_default=True, help="Output directory")
@click.option("--workers", type=int, default=None,
              help="Worker processes (overrides DP_CATE_WORKERS and the config)")
def experiment(
    config_path: Path | None, full_grid: bool, out_dir: Path, workers: int | None
) -> None:
    """Run the bias/variance experiment grid."""
    asyncio.run(_experiment_async(config_path, full_grid, out_dir, workers))


async def _experiment_async(
    config_path: Path | None, full_grid: bool, out_dir: Path, workers: int | None
) -> None:
    if config_path is not None and full_grid:
        raise click.UsageError("--config and --full-grid are mutually exclusive")
    try:
        if config_path is not None:
            config = ExperimentConfig.from_file(config_path)
        elif full_grid:
            config = ExperimentConfig.full_grid()
        else:
            config = ExperimentConfig.desk_grid()
        total = len(config.cells())
        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            console=err_console,
        ) as progress:
            task = progress.add_task("Running cells", total=total)

            def advance(record: MetricsRecord) -> None:
                progress.advance(task)

            result = await run_experiment_async(
                config, workers=workers, on_record=advance
            )
        paths = await write_outputs_async(result, out_dir)
    except DPCateError as error:
        raise click.ClickException(str(error)) from error

    if not result.records:
        err_console.print("[yellow]Empty experiment grid; wrote empty outputs[/yellow]")
    failures = result.failures
    if failures:
        err_console.print(f"[yellow]{len(failures)} cell(s) failed; see failures.txt[/yellow]")
    err_console.print(
        f"[green]{len(result.records)} cells ({config.reps} reps each) written to "
        f"{', '.join(str(path) for path in paths)}[/green]"
    )


@main.command()
@click.option("--setup", "setup_id", type=click.Choice([s.value for s in SetupId]),
              default=SetupId.C.value, show_default=True, help="Simulation setup")
@click.option("--epsilon", "epsilons", type=float, multiple=True,
              help="Budgets to sweep; repeatable (default 1, 4, 16 and non-private)")
@click.option("--n", "n", type=click.IntRange(min=1), default=8000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--feature", type=click.IntRange(min=1), default=1, show_default=True,
              help="1-based feature whose shape is reported")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Output CSV in long format")
def shapes(
    setup_id: str,
    epsilons: tuple[float, ...],
    n: int,
    seed: int,
    feature: int,
    out: Path,
) -> None:
    """Second-stage DR shape of one feature across budgets."""
    asyncio.run(_shapes_async(setup_id, epsilons or (1.0, 4.0, 16.0, math.inf), n, seed,
                              feature, out))


async def _shapes_async(
    setup_id: str,
    epsilons: tuple[float, ...],
    n: int,
    seed: int,
    feature: int,
    out: Path,
) -> None:
    if feature > get_setup(setup_id).d:
        raise click.BadParameter(f"setup {setup_id} has no feature {feature}",
                                 param_hint="--feature")
    try:
        frame = await asyncio.to_thread(
            shape_sweep, setup_id, epsilons, n, seed=seed, feature=feature - 1
        )
    except DPCateError as error:
        raise click.ClickException(str(error)) from error
    await _write_text(out, frame.to_csv(index=False))
    err_console.print(f"[green]Wrote {len(frame)} shape rows to {out}[/green]")
