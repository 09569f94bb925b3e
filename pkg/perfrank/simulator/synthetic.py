"""
Seeded synthetic markets.

Items sit around a few cluster centres; the most popular items share the
first cluster, so popularity and semantic position are correlated the way
a real catalogue's head is. Candidate lists are sampled with Zipf-like
item weights (rank + 1)^-skew, which makes candidate frequency follow the skew.
"""

import logging

import numpy as np

from perfrank.core.exceptions import ConfigurationError
from perfrank.core.schemas import MarketState
from perfrank.core.services import build_market_state, make_rng, normalize_rows
from perfrank.simulator.schemas import InteractionLog

logger = logging.getLogger(__name__)

CLUSTER_SPREAD = 0.35


def _cluster_count(d: int) -> int:
    return max(2, min(8, d // 2))


def generate_synthetic_market(
    m: int,
    n: int,
    d: int,
    c: int,
    popularity_skew: float = 1.0,
    seed: int = 0,
    user_noise: float = 0.1,
) -> tuple[MarketState, InteractionLog]:
    """
    Build a round-0 market and the interaction log the simulator trains on.

    Each user's c candidates are the positives (in candidate order, with
    sequential timestamps); c further items drawn uniformly from outside the
    candidate list are the negatives.

    Raises:
        ConfigurationError: If c > n, d < 2, or a size is not positive
    """
    if m < 1 or n < 1 or c < 1:
        raise ConfigurationError(f"m, n and c must be positive, got m={m} n={n} c={c}")
    if d < 2:
        raise ConfigurationError(f"d must be at least 2, got {d}")
    if c > n:
        raise ConfigurationError(f"infeasible market: c ({c}) exceeds n ({n})")
    if popularity_skew < 0:
        raise ConfigurationError(f"popularity_skew must be >= 0, got {popularity_skew}")

    rng = make_rng(seed, stream="market")

    # Popularity rank 0 is the most popular item
    rank = rng.permutation(n)
    weights = (rank + 1.0) ** -popularity_skew
    p = weights / weights.sum()

    n_clusters = _cluster_count(d)
    centers, _ = normalize_rows(rng.normal(size=(n_clusters, d)))
    cluster = rank * n_clusters // n
    noise = CLUSTER_SPREAD * rng.normal(size=(n, d)) / np.sqrt(d)
    items, _ = normalize_rows(centers[cluster] + noise)

    candidates = np.stack([rng.choice(n, size=c, replace=False, p=p) for _ in range(m)])

    user_ids, item_ids, labels = [], [], []
    n_negatives = min(c, n - c)
    for i in range(m):
        outside = np.setdiff1d(np.arange(n), candidates[i], assume_unique=True)
        negatives = rng.choice(outside, size=n_negatives, replace=False) if n_negatives else np.empty(0, dtype=np.int64)
        user_ids.append(np.full(c + n_negatives, i))
        item_ids.append(np.concatenate([candidates[i], negatives]))
        labels.append(np.concatenate([np.ones(c, dtype=np.int8), np.zeros(n_negatives, dtype=np.int8)]))

    user_ids = np.concatenate(user_ids)
    log = InteractionLog(
        user_ids=user_ids,
        item_ids=np.concatenate(item_ids),
        labels=np.concatenate(labels),
        timestamps=np.arange(user_ids.size),
    )

    state = build_market_state(items, candidates, seed=seed, user_noise=user_noise)
    logger.info("generated synthetic market: m=%d n=%d d=%d c=%d skew=%.2f", m, n, d, c, popularity_skew)
    return state, log
