"""
Relevance simulator: forward passes, training, persistence, and popularity categories.
"""

import copy
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.model_selection import train_test_split
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from perfrank.core.exceptions import ConfigurationError, DegenerateInputError
from perfrank.core.guards import require_same_dim, require_strictly_increasing
from perfrank.core.schemas import GroundTruthPref, ItemFeatures, MarketState
from perfrank.core.services import seed_torch
from perfrank.simulator.models import RelevanceModel
from perfrank.simulator.schemas import InteractionLog, ModelFile, TrainingReport

logger = logging.getLogger(__name__)

DEFAULT_BOUNDARIES = (5, 10, 15, 20)
MODEL_FORMAT = "perfrank-relevance"
MODEL_VERSION = 1


# ==================== Forward passes ====================

def relevance(model: RelevanceModel, x: ItemFeatures, u_star: GroundTruthPref) -> float:
    """Simulator relevance S(x; u*) in (0, 1)."""
    d = require_same_dim(x.x, u_star.u_star, what="item features and ground-truth preference")
    if d != model.d:
        raise ConfigurationError(f"simulator expects d={model.d}, got d={d}")
    with torch.no_grad():
        return float(model(torch.from_numpy(x.x.copy()), torch.from_numpy(u_star.u_star.copy())))


def relevance_tensor(model: RelevanceModel, x: torch.Tensor, u_star: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable-in-x relevance; u_star broadcasts against x."""
    return model(x, u_star)


def candidate_relevance(model: RelevanceModel, state: MarketState, items: Optional[np.ndarray] = None) -> np.ndarray:
    """
    (m, c) relevance of every user's candidates against their ground-truth preference.

    Args:
        items: Item features to score; defaults to the state's current items
    """
    features = state.items if items is None else items
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(features[state.candidates]))
        u_star = torch.tensor(state.prefs).unsqueeze(1)
        return relevance_tensor(model, x, u_star).numpy()


# ==================== Training ====================

def _accuracy(model: RelevanceModel, inputs: torch.Tensor, labels: torch.Tensor) -> float:
    if labels.numel() == 0:
        return float("nan")
    with torch.no_grad():
        predicted = (model.net(inputs).squeeze(-1) > 0).to(labels.dtype)
    return float((predicted == labels).to(torch.float64).mean())


def train_relevance_model(
    log: InteractionLog,
    features: np.ndarray,
    prefs: np.ndarray,
    epochs: int = 50,
    lr: float = 1e-3,
    batch_size: int = 256,
    seed: int = 0,
) -> tuple[RelevanceModel, TrainingReport]:
    """
    Fit S by binary cross-entropy on a 70/20/10 train/validation/test split.

    Args:
        log: Labelled (user, item) interactions
        features: Item features indexed by item id (n, d)
        prefs: Ground-truth preferences indexed by user id (m, d)

    Returns:
        Tuple of (frozen model with the best validation accuracy, TrainingReport)

    Raises:
        DegenerateInputError: If the log does not contain both labels
    """
    if np.unique(log.labels).size < 2:
        raise DegenerateInputError("degenerate labels")
    d = require_same_dim(features, prefs, what="item features and preferences")

    inputs = np.concatenate([features[log.item_ids], prefs[log.user_ids]], axis=1)
    labels = log.labels.astype(np.float64)

    index = np.arange(len(log))
    train_idx, rest_idx = train_test_split(index, test_size=0.3, random_state=seed)
    val_idx, test_idx = train_test_split(rest_idx, test_size=1 / 3, random_state=seed)

    def tensors(idx):
        return torch.from_numpy(inputs[idx]), torch.from_numpy(labels[idx])

    generator = seed_torch(seed)
    model = RelevanceModel(d)
    loader = DataLoader(TensorDataset(*tensors(train_idx)), batch_size=batch_size, shuffle=True, generator=generator)
    val_inputs, val_labels = tensors(val_idx)
    test_inputs, test_labels = tensors(test_idx)

    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = nn.BCEWithLogitsLoss()

    best_state, best_val = copy.deepcopy(model.state_dict()), -1.0
    train_loss = float("nan")
    for epoch in range(epochs):
        model.train()
        total, seen = 0.0, 0
        for batch_inputs, batch_labels in loader:
            optimizer.zero_grad()
            loss = criterion(model.net(batch_inputs).squeeze(-1), batch_labels)
            loss.backward()
            optimizer.step()
            total += float(loss) * batch_labels.numel()
            seen += batch_labels.numel()
        train_loss = total / max(seen, 1)

        model.eval()
        val_accuracy = _accuracy(model, val_inputs, val_labels)
        if val_accuracy > best_val:
            best_val, best_state = val_accuracy, copy.deepcopy(model.state_dict())
        logger.debug("simulator epoch %d: train loss %.4f, val accuracy %.4f", epoch + 1, train_loss, val_accuracy)

    model.load_state_dict(best_state)
    model.freeze()
    report = TrainingReport(
        epochs=epochs,
        train_size=len(train_idx),
        val_size=len(val_idx),
        test_size=len(test_idx),
        final_train_loss=train_loss,
        best_val_accuracy=max(best_val, 0.0),
        test_accuracy=_accuracy(model, test_inputs, test_labels),
    )
    logger.info("simulator trained: test accuracy %.4f", report.test_accuracy)
    return model, report


# ==================== Persistence ====================

def save_model(model: RelevanceModel, path: Path) -> Path:
    """Write weights with a format tag, version, and layer-shape header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ModelFile(d=model.d, layer_shapes=model.layer_shapes())
    torch.save(
        {
            "format": header.format,
            "version": header.version,
            "d": header.d,
            "layer_shapes": header.layer_shapes,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_model(path: Path, d: Optional[int] = None) -> RelevanceModel:
    """
    Load a saved simulator and freeze it.

    Raises:
        ConfigurationError: If the file is missing, has the wrong format or
            version, or its layer shapes do not match the declared dimension
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"simulator file not found: {path}")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise ConfigurationError(f"could not read simulator file {path}: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise ConfigurationError(f"{path} is not a perfrank simulator file")
    if payload.get("version") != MODEL_VERSION:
        raise ConfigurationError(f"unsupported simulator version {payload.get('version')} in {path}")
    if d is not None and payload["d"] != d:
        raise ConfigurationError(f"simulator in {path} was trained for d={payload['d']}, market has d={d}")

    model = RelevanceModel(payload["d"])
    if model.layer_shapes() != [list(shape) for shape in payload["layer_shapes"]]:
        raise ConfigurationError(f"layer shapes in {path} do not match a d={payload['d']} simulator")
    model.load_state_dict(payload["state_dict"])
    return model.freeze()


# ==================== Popularity ====================

def candidate_frequencies(candidates: np.ndarray, n: int) -> np.ndarray:
    """Number of candidate lists containing each item."""
    return np.bincount(np.asarray(candidates).reshape(-1), minlength=n)


def category_array(candidates: np.ndarray, n: int, boundaries: Sequence[float] = DEFAULT_BOUNDARIES) -> np.ndarray:
    """Per-item category in 1..5, or 0 for items in no candidate list."""
    if len(boundaries) != 4:
        raise ConfigurationError(f"popularity boundaries need 4 thresholds, got {len(boundaries)}")
    edges = require_strictly_increasing(boundaries, "popularity boundaries")
    freq = candidate_frequencies(candidates, n)
    categories = 1 + np.searchsorted(edges, freq, side="left")
    return np.where(freq > 0, categories, 0)


def categorize_by_popularity(
    candidates: np.ndarray,
    boundaries: Sequence[float] = DEFAULT_BOUNDARIES,
    n: Optional[int] = None,
) -> dict[int, int]:
    """
    Map each item appearing in at least one candidate list to a popularity
    category: frequency <= b1 is category 1, b1 < frequency <= b2 is 2, and so
    on, with frequency > b4 in category 5.
    """
    n = int(np.max(candidates)) + 1 if n is None else n
    categories = category_array(candidates, n, boundaries)
    return {int(j): int(categories[j]) for j in np.flatnonzero(categories)}


def category_counts(categories: dict[int, int]) -> list[int]:
    """Number of items per category 1..5."""
    counts = np.bincount(np.fromiter(categories.values(), dtype=np.int64, count=len(categories)), minlength=6)
    return counts[1:6].tolist()
