"""
CSV ingestion and export of markets.

items.csv:         item_id, f1..fd          (header required)
interactions.csv:  user_id, item_id, label[, timestamp]

Raw item columns can be encoded through a YAML preprocessing manifest:

    columns:
      cuisine: {rule: onehot}
      price:   {rule: minmax}
      rating:  {rule: graded, levels: [low, mid, high]}

Columns the manifest does not name must already be numeric.
"""

import logging
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from perfrank.core.exceptions import ConfigurationError, IngestionError
from perfrank.core.schemas import MarketState
from perfrank.core.services import DEGENERATE_NORM, build_market_state, make_rng, normalize_rows
from perfrank.simulator.schemas import InteractionLog, LoadReport, PreprocessingManifest, RowError

logger = logging.getLogger(__name__)

ITEM_ID = "item_id"
INTERACTION_COLUMNS = ("user_id", "item_id", "label")
# Data rows start on line 2 of a file with a header
_FIRST_DATA_LINE = 2


def load_manifest(path: Optional[Path]) -> PreprocessingManifest:
    if path is None:
        return PreprocessingManifest()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return PreprocessingManifest.model_validate(raw)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"manifest not found: {path}") from exc
    except (yaml.YAMLError, ValidationError) as exc:
        raise ConfigurationError(f"invalid preprocessing manifest {path}: {exc}") from exc


def _graded(raw: pd.Series, levels: Optional[list]) -> pd.Series:
    if levels is None:
        levels = sorted(raw.dropna().unique().tolist())
    position = {str(level): i for i, level in enumerate(levels)}
    steps = max(len(levels) - 1, 1)
    return raw.astype(str).map(position).astype(float) / steps


def encode_item_frame(frame: pd.DataFrame, manifest: PreprocessingManifest) -> pd.DataFrame:
    """
    Apply the manifest's encoding rules and coerce the remaining columns to numbers.

    Values that cannot be encoded become NaN; the caller turns them into row errors.

    Raises:
        IngestionError: If the manifest names a column the frame does not have
    """
    missing = [name for name in manifest.columns if name not in frame.columns]
    if missing:
        raise IngestionError(f"items file is missing manifest columns: {', '.join(missing)}")

    encoded: list[pd.DataFrame] = []
    for column in frame.columns:
        if column == ITEM_ID:
            continue
        raw = frame[column]
        rule = manifest.columns.get(column)

        if rule is None:
            encoded.append(pd.to_numeric(raw, errors="coerce").rename(column).to_frame())
        elif rule.rule == "minmax":
            values = pd.to_numeric(raw, errors="coerce")
            low, high = values.min(), values.max()
            scaled = (values - low) / (high - low) if high > low else values * 0.0
            encoded.append(scaled.rename(column).to_frame())
        elif rule.rule == "graded":
            encoded.append(_graded(raw, rule.levels).rename(column).to_frame())
        else:
            dummies = pd.get_dummies(raw, prefix=column, prefix_sep="=", dtype=float)
            dummies.loc[raw.isna()] = np.nan
            encoded.append(dummies)

    if not encoded:
        raise IngestionError("items file has no feature columns")
    return pd.concat(encoded, axis=1)


def _read_csv(path: Path, id_columns: tuple[str, ...]) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={column: str for column in id_columns})
    except FileNotFoundError as exc:
        raise IngestionError(f"file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestionError(f"could not parse {path}: {exc}") from exc


def _load_items(path: Path, manifest: PreprocessingManifest, report: LoadReport) -> tuple[np.ndarray, list[str]]:
    frame = _read_csv(path, (ITEM_ID,))
    if ITEM_ID not in frame.columns:
        raise IngestionError(f"{path.name}: missing column '{ITEM_ID}'", report)

    features = encode_item_frame(frame, manifest)
    matrix = features.to_numpy(dtype=np.float64)
    normed, norms = normalize_rows(np.nan_to_num(matrix))

    ids = frame[ITEM_ID]
    duplicated = ids.duplicated(keep="first").to_numpy()
    keep = np.ones(len(frame), dtype=bool)
    for row in range(len(frame)):
        line = row + _FIRST_DATA_LINE
        bad = features.columns[np.isnan(matrix[row])].tolist()
        if pd.isna(ids.iloc[row]):
            message = "missing item_id"
        elif bad:
            message = f"non-numeric value in {', '.join(sorted({str(name).split('=')[0] for name in bad}))}"
        elif norms[row] < DEGENERATE_NORM:
            message = "item features have zero norm"
        elif duplicated[row]:
            message = f"duplicate item_id {ids.iloc[row]}"
        else:
            continue
        keep[row] = False
        report.errors.append(RowError(file=path.name, row=line, message=message))

    report.feature_columns = [str(name) for name in features.columns]
    return normed[keep], ids[keep].tolist()


def ingest_csv(
    items_path: Path,
    interactions_path: Path,
    c: int,
    min_interactions: Optional[int] = None,
    manifest_path: Optional[Path] = None,
    candidate_policy: Literal["first", "random"] = "first",
    seed: int = 0,
    user_noise: float = 0.1,
) -> tuple[MarketState, InteractionLog, LoadReport]:
    """
    Load a market from CSV files.

    Items are encoded (per the optional manifest) and unit-normalised. Users
    with fewer than `min_interactions` rows (default c) are dropped; a user's
    candidate list is their first c positively-labelled items by timestamp
    (file order without a timestamp column), or a seeded random choice of c of
    them under the "random" policy.

    Row-level problems are collected in the returned LoadReport and the
    offending rows skipped.

    Raises:
        IngestionError: If a required column is missing or no usable users remain
    """
    items_path, interactions_path = Path(items_path), Path(interactions_path)
    manifest = load_manifest(manifest_path)
    min_interactions = c if min_interactions is None else min_interactions
    report = LoadReport()

    items, item_ids = _load_items(items_path, manifest, report)
    item_index = {item_id: j for j, item_id in enumerate(item_ids)}

    frame = _read_csv(interactions_path, ("user_id", "item_id"))
    missing = [column for column in INTERACTION_COLUMNS if column not in frame.columns]
    if missing:
        raise IngestionError(f"{interactions_path.name}: missing columns {', '.join(missing)}", report)

    has_timestamp = "timestamp" in frame.columns
    frame = frame.assign(
        _line=np.arange(len(frame)) + _FIRST_DATA_LINE,
        _item=frame["item_id"].map(item_index),
        _label=pd.to_numeric(frame["label"], errors="coerce"),
        _time=pd.to_numeric(frame["timestamp"], errors="coerce") if has_timestamp else 0.0,
    )

    valid = pd.Series(True, index=frame.index)
    checks = [
        (frame["user_id"].isna(), "missing user_id"),
        (frame["_item"].isna(), "unknown item_id"),
        (~frame["_label"].isin([0, 1]), "label must be 0 or 1"),
    ]
    if has_timestamp:
        checks.append((frame["_time"].isna(), "non-numeric timestamp"))
    for failed, message in checks:
        for line in frame.loc[failed & valid, "_line"]:
            report.errors.append(RowError(file=interactions_path.name, row=int(line), message=message))
        valid &= ~failed
    frame = frame[valid]

    sizes = frame.groupby("user_id", sort=False).size()
    positives = (
        frame[frame["_label"] == 1]
        .sort_values(["_time", "_line"], kind="stable")
        .drop_duplicates(["user_id", "_item"])
    )
    grouped = {user: group["_item"].to_numpy(dtype=np.int64) for user, group in positives.groupby("user_id", sort=False)}

    rng = make_rng(seed, stream="ingest")
    candidates, kept_users = [], []
    for user in pd.unique(frame["user_id"]):
        if sizes[user] < min_interactions:
            report.dropped_users += 1
            continue
        liked = grouped.get(user, np.empty(0, dtype=np.int64))
        if liked.size < c:
            report.dropped_users += 1
            report.errors.append(RowError(
                file=interactions_path.name,
                message=f"user {user}: {liked.size} positive interactions, need c={c}",
            ))
            continue
        if candidate_policy == "random":
            liked = liked[np.sort(rng.choice(liked.size, size=c, replace=False))]
        candidates.append(liked[:c])
        kept_users.append(user)

    if not kept_users:
        raise IngestionError(f"no users with at least {c} positive interactions", report)

    user_index = {user: i for i, user in enumerate(kept_users)}
    kept = frame[frame["user_id"].isin(kept_users)]
    log = InteractionLog(
        user_ids=kept["user_id"].map(user_index).to_numpy(dtype=np.int64),
        item_ids=kept["_item"].to_numpy(dtype=np.int64),
        labels=kept["_label"].to_numpy(dtype=np.int64),
        timestamps=kept["_time"].to_numpy(dtype=np.float64) if has_timestamp else None,
    )

    report.items_loaded = items.shape[0]
    report.users_loaded = len(kept_users)
    report.item_ids = [str(item_id) for item_id in item_ids]
    report.user_ids = [str(user) for user in kept_users]
    if report.errors:
        logger.warning("ingestion: %d row-level errors (first: %s)", len(report.errors), report.errors[0].message)

    state = build_market_state(items, np.stack(candidates), seed=seed, user_noise=user_noise)
    return state, log, report


def write_market_csv(state: MarketState, log: InteractionLog, out_dir: Path) -> tuple[Path, Path]:
    """Export a round-0 market in the ingestion schema."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    items = pd.DataFrame(state.items, columns=[f"f{i + 1}" for i in range(state.d)])
    items.insert(0, ITEM_ID, np.arange(state.n))
    items_path = out_dir / "items.csv"
    items.to_csv(items_path, index=False, float_format="%.17g")

    interactions = pd.DataFrame({"user_id": log.user_ids, "item_id": log.item_ids, "label": log.labels})
    if log.timestamps is not None:
        interactions["timestamp"] = log.timestamps
    interactions_path = out_dir / "interactions.csv"
    interactions.to_csv(interactions_path, index=False)
    return items_path, interactions_path
