from pathlib import Path
from typing import Optional

import typer

from perfrank import __version__
from perfrank.core.config import get_settings
from perfrank.core.logging import configure_logging
from perfrank.harness import commands

app = typer.Typer(
    name="perfrank",
    help="Performative fairness-aware re-ranking simulator",
    no_args_is_help=True,
    add_completion=False,
)


def _version(value: bool):
    if value:
        typer.echo(f"perfrank {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="Experiment YAML (or a run_manifest.yaml)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override hyper.seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Worker processes for the policy grid"),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Defaults to PERFRANK_LOG_LEVEL"),
    version: bool = typer.Option(False, "--version", callback=_version, is_eager=True),
):
    configure_logging(log_level or get_settings().LOG_LEVEL)
    ctx.obj = commands.GlobalOptions(config=config, seed=seed, out=out, threads=threads)


# Register commands
app.command("gen-data")(commands.gen_data)
app.command("train-sim")(commands.train_sim)
app.command("run")(commands.run)
app.command("report")(commands.report)
app.command("baseline")(commands.baseline)
