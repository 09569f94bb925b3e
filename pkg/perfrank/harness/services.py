"""
Experiment orchestration: config loading, market and simulator preparation,
the policy grid, metrics files, and reports.
"""

import logging
import multiprocessing
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor
from io import StringIO
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from perfrank import __version__
from perfrank.core.exceptions import ConfigurationError, ReportError
from perfrank.core.schemas import MarketState
from perfrank.diffrank.services import exact_rank
from perfrank.dynamics.schemas import Policy, RoundRecord
from perfrank.dynamics.services import ranking_metrics, run_dynamics
from perfrank.harness.schemas import CategoryShift, CsvSource, ExperimentConfig, PolicySummary, Report, RunResult
from perfrank.simulator.ingest import ingest_csv
from perfrank.simulator.models import RelevanceModel
from perfrank.simulator.schemas import InteractionLog, LoadReport, TrainingReport
from perfrank.simulator.services import (
    DEFAULT_BOUNDARIES,
    candidate_relevance,
    category_array,
    load_model,
    save_model,
    train_relevance_model,
)
from perfrank.simulator.synthetic import generate_synthetic_market

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "policy", "round", "mean_ndcg_at_k", "mean_gini_at_k",
    "cat1", "cat2", "cat3", "cat4", "cat5", "warnings",
]
FLOAT_FORMAT = "%.6f"
METRICS_FILE = "metrics.csv"
BASELINE_FILE = "baseline.csv"
MANIFEST_FILE = "run_manifest.yaml"
SUMMARY_FILE = "summary.txt"
SIMULATOR_FILE = "simulator.pt"


# ==================== Config ====================

def _line_of(node: Optional[yaml.Node], loc: Sequence[Any]) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along a validation error location."""
    line = None if node is None else node.start_mark.line + 1
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next(((key, value) for key, value in node.value if key.value == str(part)), None)
            if match is None:
                continue
            line, node = match[0].start_mark.line + 1, match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
    return line


def _format_errors(exc: ValidationError, root: Optional[yaml.Node]) -> list[str]:
    messages = []
    for error in exc.errors():
        loc = error["loc"]
        path = ".".join(str(part) for part in loc) or "<root>"
        line = _line_of(root, loc)
        prefix = f"line {line}: " if line is not None else ""
        messages.append(f"{prefix}{path}: {error['msg']}")
    return messages


def parse_config(text: str, base: Path = Path(".")) -> ExperimentConfig:
    """
    Validate YAML text as an ExperimentConfig.

    A run manifest (a mapping with a `config` key) is accepted as well, so a
    finished run can be re-executed from its manifest.

    Raises:
        ConfigurationError: With one `line N: path: message` entry per problem
    """
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigurationError(f"{where}malformed YAML: {getattr(exc, 'problem', exc)}") from exc

    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping at the top level")
    if "config" in data and "versions" in data:
        data = data["config"]
        root = next((value for key, value in root.value if key.value == "config"), root)

    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        messages = _format_errors(exc, root)
        raise ConfigurationError("invalid config:\n" + "\n".join(messages), messages) from exc

    if isinstance(config.data, CsvSource):
        config = config.model_copy(update={"data": config.data.resolved(base)})
    return config


def load_config(path: Optional[Path]) -> ExperimentConfig:
    """Load an experiment config file; no path means every default."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    return parse_config(text, base=path.resolve().parent)


def resolve_threads(env_threads: Optional[int], cli_threads: Optional[int], config_threads: int) -> int:
    """PERFRANK_THREADS beats --threads, which beats the config file."""
    for value in (env_threads, cli_threads):
        if value is not None:
            if value < 1:
                raise ConfigurationError(f"threads must be >= 1, got {value}")
            return value
    return config_threads


# ==================== Market and simulator ====================

def prepare_market(config: ExperimentConfig) -> tuple[MarketState, InteractionLog, Optional[LoadReport]]:
    hyper = config.hyper
    source = config.data
    if isinstance(source, CsvSource):
        return ingest_csv(
            source.items,
            source.interactions,
            c=hyper.c,
            min_interactions=source.min_interactions,
            manifest_path=source.manifest,
            candidate_policy=source.candidate_policy,
            seed=hyper.seed,
            user_noise=hyper.user_noise,
        )
    state, log = generate_synthetic_market(
        m=source.m,
        n=source.n,
        d=source.d,
        c=hyper.c,
        popularity_skew=source.popularity_skew,
        seed=hyper.seed,
        user_noise=hyper.user_noise,
    )
    return state, log, None


def prepare_simulator(
    config: ExperimentConfig,
    state: MarketState,
    log: InteractionLog,
) -> tuple[RelevanceModel, Optional[TrainingReport]]:
    """Load the simulator named by the config, or train it on the market's log (saving it if a path is set)."""
    spec = config.simulator
    if spec.path is not None and spec.path.is_file():
        logger.info("loading simulator from %s", spec.path)
        return load_model(spec.path, d=state.d), None

    model, report = train_relevance_model(
        log, state.items, state.prefs,
        epochs=spec.epochs, lr=spec.lr, batch_size=spec.batch_size, seed=config.hyper.seed,
    )
    if spec.path is not None:
        save_model(model, spec.path)
    return model, report


def cmd_baseline_metrics(
    state: MarketState,
    model: RelevanceModel,
    k: int,
    boundaries: Sequence[float] = DEFAULT_BOUNDARIES,
) -> RoundRecord:
    """
    Round-0 reference: every user's candidates ranked purely by simulator
    relevance (NDCG@k is 1 by construction).
    """
    relevance = candidate_relevance(model, state)
    perms = [exact_rank(relevance[i]).perm for i in range(state.m)]
    categories = category_array(state.candidates, state.n, boundaries)
    ndcg, gini, freq = ranking_metrics(relevance, perms, categories[state.candidates], k)
    return RoundRecord(
        policy="baseline",
        round=0,
        mean_ndcg_at_k=ndcg,
        mean_gini_at_k=gini,
        category_freq=freq,
        warnings=0,
    )


# ==================== Policy grid ====================

def run_policy(
    state: MarketState,
    policy: Policy,
    model: RelevanceModel,
    boundaries: Sequence[float],
    shard: Optional[Path] = None,
) -> list[RoundRecord]:
    """Run one policy's dynamics; with `shard`, also write its rows there."""
    torch.set_num_threads(1)
    records = run_dynamics(state, policy, model, boundaries=boundaries)
    if shard is not None:
        write_metrics(records, shard)
    return records


def run_grid(
    state: MarketState,
    policies: Sequence[Policy],
    model: RelevanceModel,
    boundaries: Sequence[float],
    threads: int = 1,
    shard_dir: Optional[Path] = None,
) -> list[RoundRecord]:
    """
    Run every policy from the same initial state and merge their records in
    policy order. With threads > 1 policies run in worker processes, each
    writing its own shard file.
    """
    if threads <= 1 or len(policies) <= 1:
        return [record for policy in policies for record in run_policy(state, policy, model, boundaries)]

    shard_dir = Path(shard_dir or ".")
    shard_dir.mkdir(parents=True, exist_ok=True)
    shards = [shard_dir / f"shard_{index:03d}.csv" for index in range(len(policies))]
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(threads, len(policies)), mp_context=context) as pool:
        futures = [
            pool.submit(run_policy, state, policy, model, list(boundaries), shard)
            for policy, shard in zip(policies, shards)
        ]
        for future in futures:
            future.result()

    records: list[RoundRecord] = []
    for shard in shards:
        shard_records, _ = read_metrics(shard)
        records.extend(shard_records)
        shard.unlink()
    return records


def run_experiment(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> RunResult:
    """
    Train (or load) the simulator, run the whole policy grid, and write
    run_manifest.yaml, baseline.csv, metrics.csv and summary.txt to out_dir.

    Nothing is written to out_dir until every policy has finished; shards live
    in a temporary directory inside it that is removed on success or failure.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    state, log, load_report = prepare_market(config)
    if load_report is not None and load_report.errors:
        logger.warning("%d ingestion errors; see the load report", len(load_report.errors))
    model, training = prepare_simulator(config, state, log)

    baseline = cmd_baseline_metrics(state, model, config.hyper.k, config.popularity_boundaries)
    policies = config.build_policies()
    logger.info("running %d policies for %d rounds (%d worker(s))", len(policies), config.hyper.rounds, threads)
    with tempfile.TemporaryDirectory(prefix="shards_", dir=out_dir) as shard_dir:
        records = run_grid(state, policies, model, config.popularity_boundaries, threads, Path(shard_dir))
    report = build_report(records, baseline, config.report.compare_rounds)

    manifest_path = write_manifest(config, out_dir / MANIFEST_FILE)
    if training is not None:
        save_model(model, out_dir / SIMULATOR_FILE)
    baseline_path = write_metrics([baseline], out_dir / BASELINE_FILE)
    metrics_path = write_metrics(records, out_dir / METRICS_FILE)
    summary_path = out_dir / SUMMARY_FILE
    summary_path.write_text(render_report_text(report), encoding="utf-8")

    return RunResult(
        out_dir=out_dir,
        metrics=metrics_path,
        baseline=baseline_path,
        manifest=manifest_path,
        summary=summary_path,
        rows=len(records),
    )


def write_manifest(config: ExperimentConfig, path: Path) -> Path:
    manifest = {
        "config": config.model_dump(mode="json", by_alias=True),
        "seed": config.hyper.seed,
        "versions": {
            "perfrank": str(__version__),
            "python": str(platform.python_version()),
            "numpy": str(np.__version__),
            "torch": str(torch.__version__),
            "pandas": str(pd.__version__),
        },
    }
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return path


# ==================== Metrics files ====================

def write_metrics(records: Sequence[RoundRecord], path: Path) -> Path:
    rows = [
        {
            "policy": record.policy,
            "round": record.round,
            "mean_ndcg_at_k": record.mean_ndcg_at_k,
            "mean_gini_at_k": record.mean_gini_at_k,
            **{f"cat{index + 1}": value for index, value in enumerate(record.category_freq)},
            "warnings": record.warnings,
        }
        for record in records
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_metrics(path: Path) -> tuple[list[RoundRecord], int]:
    """
    Parse a metrics file.

    Returns:
        Tuple of (records, number of malformed rows skipped)

    Raises:
        ReportError: If the file is missing, has the wrong header, or holds no records
    """
    path = Path(path)
    bad_lines: list[list[str]] = []
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, engine="python",
            on_bad_lines=lambda line: bad_lines.append(line),
        )
    except FileNotFoundError as exc:
        raise ReportError(f"metrics file not found: {path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise ReportError("no records") from exc

    missing = [column for column in METRICS_COLUMNS if column not in frame.columns]
    if missing:
        raise ReportError(f"{path.name}: missing columns {', '.join(missing)}")

    records: list[RoundRecord] = []
    malformed = len(bad_lines)
    for row in frame.itertuples(index=False):
        values = row._asdict()
        try:
            records.append(RoundRecord(
                policy=values["policy"],
                round=int(values["round"]),
                mean_ndcg_at_k=float(values["mean_ndcg_at_k"]),
                mean_gini_at_k=float(values["mean_gini_at_k"]),
                category_freq=tuple(float(values[f"cat{index}"]) for index in range(1, 6)),
                warnings=int(values["warnings"]),
            ))
        except (ValueError, ValidationError):
            malformed += 1
    if malformed:
        logger.warning("%s: skipped %d malformed rows", path.name, malformed)
    if not records:
        raise ReportError("no records")
    return records, malformed


# ==================== Reports ====================

def build_report(
    records: Sequence[RoundRecord],
    baseline: Optional[RoundRecord] = None,
    compare_rounds: Sequence[int] = (5, 9),
    malformed_rows: int = 0,
) -> Report:
    """
    Per policy: NDCG and Gini at the first and last recorded rounds, and the
    category frequencies at round 0 and each compare round that exists.
    Round 0 comes from the baseline record when given.
    """
    if not records:
        raise ReportError("no records")

    by_policy: dict[str, dict[int, RoundRecord]] = {}
    for record in records:
        by_policy.setdefault(record.policy, {})[record.round] = record

    report = Report(malformed_rows=malformed_rows)
    for policy, rounds in by_policy.items():
        trained = sorted(t for t in rounds if t >= 1) or sorted(rounds)
        first, last = rounds[trained[0]], rounds[trained[-1]]
        report.policies.append(PolicySummary(
            policy=policy,
            first_round=first.round,
            last_round=last.round,
            ndcg_first=first.mean_ndcg_at_k,
            ndcg_last=last.mean_ndcg_at_k,
            gini_first=first.mean_gini_at_k,
            gini_last=last.mean_gini_at_k,
        ))

        origin = baseline if baseline is not None else rounds.get(0)
        if origin is not None:
            report.shifts.append(CategoryShift(policy=policy, round=0, category_freq=origin.category_freq))
        for t in compare_rounds:
            if t in rounds:
                report.shifts.append(CategoryShift(policy=policy, round=t, category_freq=rounds[t].category_freq))
    return report


def report_tables(report: Report) -> list[Table]:
    summary = Table(title="Policy summary (first -> last round)")
    for column in ("policy", "rounds", "NDCG", "dNDCG", "Gini", "dGini"):
        summary.add_column(column, justify="left" if column == "policy" else "right")
    for row in report.policies:
        summary.add_row(
            row.policy,
            f"{row.first_round}-{row.last_round}",
            f"{row.ndcg_first:.4f} -> {row.ndcg_last:.4f}",
            f"{row.delta_ndcg:+.4f}",
            f"{row.gini_first:.4f} -> {row.gini_last:.4f}",
            f"{row.delta_gini:+.4f}",
        )

    shifts = Table(title="Top-k frequency by popularity category")
    shifts.add_column("policy")
    shifts.add_column("round", justify="right")
    for index in range(1, 6):
        shifts.add_column(f"cat{index}", justify="right")
    for row in report.shifts:
        shifts.add_row(row.policy, str(row.round), *(f"{value:.3f}" for value in row.category_freq))

    return [summary, shifts]


def render_report(report: Report, console: Console) -> None:
    for table in report_tables(report):
        console.print(table)
    if report.malformed_rows:
        console.print(f"[yellow]{report.malformed_rows} malformed rows skipped[/yellow]")


def render_report_text(report: Report) -> str:
    """Plain-text rendering for summary.txt."""
    buffer = StringIO()
    render_report(report, Console(file=buffer, width=120, color_system=None, force_terminal=False))
    return buffer.getvalue()
