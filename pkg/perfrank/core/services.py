"""
Scoring, ground-truth preferences, and seeded randomness.

All randomness in perfrank flows from `make_rng(seed, offset, stream)`. Round
generators use offset = round index, so their sub-seeds are seed + t; the
synthetic market, ingestion and the warm start draw from their own streams.
"""

import logging
from typing import Literal, Sequence, Union

import numpy as np
import torch

from perfrank.core.exceptions import DegenerateInputError
from perfrank.core.guards import require_same_dim
from perfrank.core.schemas import CandidateList, GroundTruthPref, ItemFeatures, MarketState, UserRep

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12

Stream = Literal["round", "market", "ingest", "warm_start"]
_STREAM_KEYS = {"market": 1, "ingest": 2, "warm_start": 3}


def make_rng(seed: int, offset: int = 0, stream: Stream = "round") -> np.random.Generator:
    """
    Seeded numpy generator.

    Args:
        offset: Added to the seed; rounds pass their index
        stream: Purpose of the draws; streams other than "round" never share
            state with any round generator
    """
    sub_seed = seed + offset
    if stream == "round":
        return np.random.default_rng(sub_seed)
    return np.random.default_rng([sub_seed, _STREAM_KEYS[stream]])


def seed_torch(seed: int) -> torch.Generator:
    """Seed torch's global RNG (used by layer initialisation) and return a local generator."""
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def normalize_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    L2-normalise the last axis.

    Returns:
        Tuple of (normalised array, norms). Rows with norm below DEGENERATE_NORM
        are returned unchanged; callers inspect the norms to detect them.
    """
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    return matrix / safe, norms[..., 0]


def score(u: UserRep, x: ItemFeatures) -> float:
    """Personalised score sigma(x; u) = u . x."""
    require_same_dim(u.u, x.x, what="user representation and item features")
    return float(np.dot(u.u, x.x))


def ground_truth_pref(cands: CandidateList, items_round0: Union[Sequence[ItemFeatures], np.ndarray]) -> GroundTruthPref:
    """
    Normalised mean of the round-0 features of a user's candidates.

    Args:
        cands: The user's candidate list
        items_round0: Round-0 items, either ItemFeatures indexed by id or an (n, d) matrix

    Raises:
        DegenerateInputError: If the mean vector is zero
    """
    if isinstance(items_round0, np.ndarray):
        features = items_round0[list(cands.items)]
    else:
        by_id = {item.id: item.x for item in items_round0}
        features = np.stack([by_id[j] for j in cands.items])

    mean = features.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < DEGENERATE_NORM:
        raise DegenerateInputError(f"degenerate candidate set for user {cands.user_id}")
    return GroundTruthPref(id=cands.user_id, u_star=mean / norm)


def ground_truth_prefs(candidates: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorised ground_truth_pref over all users: returns the (m, d) matrix U*."""
    means = items[candidates].mean(axis=1)
    prefs, norms = normalize_rows(means)
    degenerate = np.flatnonzero(norms < DEGENERATE_NORM)
    if degenerate.size:
        raise DegenerateInputError(f"degenerate candidate set for user {int(degenerate[0])}")
    return prefs


def init_user_reps(prefs: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Warm start: u_i = u*_i + N(0, noise^2 I), left unnormalised."""
    return prefs + noise * rng.normal(size=prefs.shape)


def build_market_state(items: np.ndarray, candidates: np.ndarray, seed: int, user_noise: float = 0.1) -> MarketState:
    """
    Assemble the round-0 state from unit-norm items and candidate lists.

    Ground-truth preferences are frozen from these round-0 features; user
    representations start at the preferences plus seeded Gaussian noise.
    """
    prefs = ground_truth_prefs(candidates, items)
    users = init_user_reps(prefs, user_noise, make_rng(seed, stream="warm_start"))
    logger.debug("built market: n=%d m=%d d=%d c=%d",
                 items.shape[0], users.shape[0], items.shape[1], candidates.shape[1])
    return MarketState(round=0, items=items, users=users, candidates=candidates, prefs=prefs)
