"""
Command handlers for the perfrank CLI.

Handlers stay thin: they resolve global options, call into
perfrank.harness.services, and print results. Any PerfRankError escaping a
handler becomes the process exit code it carries.
"""

import functools
import logging
from pathlib import Path
from typing import Callable, Optional

import typer
from pydantic import BaseModel
from rich.console import Console
from rich.table import Table

from perfrank.core.config import get_settings
from perfrank.core.exceptions import ConfigurationError, PerfRankError
from perfrank.harness.schemas import CsvSource, ExperimentConfig
from perfrank.harness.services import (
    BASELINE_FILE,
    SIMULATOR_FILE,
    build_report,
    cmd_baseline_metrics,
    load_config,
    prepare_market,
    prepare_simulator,
    read_metrics,
    render_report,
    resolve_threads,
    run_experiment,
    write_metrics,
)
from perfrank.simulator.ingest import write_market_csv
from perfrank.simulator.services import save_model

logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)


class GlobalOptions(BaseModel):
    """Options given before the subcommand."""
    config: Optional[Path] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    threads: Optional[int] = None


def cli_errors(handler: Callable) -> Callable:
    """Report PerfRankError on stderr and exit with its code."""

    @functools.wraps(handler)
    def wrapper(*args, **kwargs):
        try:
            return handler(*args, **kwargs)
        except PerfRankError as exc:
            messages = getattr(exc, "messages", None) or [exc.detail]
            for message in messages:
                err_console.print(f"[red]error:[/red] {message}", highlight=False)
            raise typer.Exit(code=exc.exit_code) from exc

    return wrapper


def _options(ctx: typer.Context) -> GlobalOptions:
    return ctx.obj if isinstance(ctx.obj, GlobalOptions) else GlobalOptions()


def _config(options: GlobalOptions) -> ExperimentConfig:
    config = load_config(options.config)
    return config if options.seed is None else config.with_seed(options.seed)


def _out_dir(options: GlobalOptions, config: ExperimentConfig) -> Path:
    return options.out or config.output_dir or get_settings().OUTPUT_DIR


@cli_errors
def gen_data(ctx: typer.Context):
    """
    Generate the configured synthetic market and write items.csv and
    interactions.csv in the ingestion schema.
    """
    options = _options(ctx)
    config = _config(options)
    if isinstance(config.data, CsvSource):
        raise ConfigurationError("gen-data needs a synthetic data source")

    state, log, _ = prepare_market(config)
    items_path, interactions_path = write_market_csv(state, log, _out_dir(options, config))
    console.print(f"wrote {items_path} ({state.n} items, d={state.d})")
    console.print(f"wrote {interactions_path} ({len(log)} interactions, {state.m} users)")


@cli_errors
def train_sim(
    ctx: typer.Context,
    model_path: Optional[Path] = typer.Option(None, "--model", help="Where to save the simulator"),
):
    """Train the relevance simulator on the configured market and save it."""
    options = _options(ctx)
    config = _config(options)
    state, log, _ = prepare_market(config)
    # Always train here, even when the config names an existing simulator file
    config = config.model_copy(update={"simulator": config.simulator.model_copy(update={"path": None})})
    model, report = prepare_simulator(config, state, log)

    target = model_path or _out_dir(options, config) / SIMULATOR_FILE
    save_model(model, target)
    console.print(
        f"simulator saved to {target}: test accuracy {report.test_accuracy:.4f} "
        f"(train {report.train_size}, val {report.val_size}, test {report.test_size})"
    )


@cli_errors
def run(ctx: typer.Context):
    """Run every policy of the grid and write metrics, baseline, manifest and summary."""
    options = _options(ctx)
    config = _config(options)
    threads = resolve_threads(get_settings().THREADS, options.threads, config.threads)
    result = run_experiment(config, _out_dir(options, config), threads=threads)

    console.print(result.summary.read_text(encoding="utf-8"), highlight=False, markup=False)
    console.print(f"{result.rows} rows written to {result.metrics}")


@cli_errors
def report(
    ctx: typer.Context,
    metrics: Path = typer.Argument(..., help="metrics.csv written by `run`"),
    baseline: Optional[Path] = typer.Option(None, "--baseline", help="Round-0 file; defaults to baseline.csv beside metrics"),
):
    """Summarise a metrics file: per-policy deltas and the category-shift table."""
    options = _options(ctx)
    compare_rounds = load_config(options.config).report.compare_rounds

    records, malformed = read_metrics(metrics)
    baseline_path = baseline or Path(metrics).with_name(BASELINE_FILE)
    baseline_record = None
    if baseline_path.is_file():
        baseline_record = read_metrics(baseline_path)[0][0]

    render_report(build_report(records, baseline_record, compare_rounds, malformed), console)


@cli_errors
def baseline(ctx: typer.Context):
    """Rank candidates by simulator relevance alone and report the round-0 metrics."""
    options = _options(ctx)
    config = _config(options)
    state, log, _ = prepare_market(config)
    model, _ = prepare_simulator(config, state, log)

    record = cmd_baseline_metrics(state, model, config.hyper.k, config.popularity_boundaries)
    path = write_metrics([record], _out_dir(options, config) / BASELINE_FILE)

    table = Table(title=f"Round-0 baseline (k={config.hyper.k})")
    for column in ("NDCG@k", "Gini@k", "cat1", "cat2", "cat3", "cat4", "cat5"):
        table.add_column(column, justify="right")
    table.add_row(
        f"{record.mean_ndcg_at_k:.4f}",
        f"{record.mean_gini_at_k:.4f}",
        *(f"{value:.3f}" for value in record.category_freq),
    )
    console.print(table)
    console.print(f"written to {path}")
