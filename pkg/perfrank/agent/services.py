"""
The strategic content-creator agent.

Each item's creator sees the normalised mean representation of its audience and
moves the item on the unit sphere to maximise w_hat . x' - alpha ||x' - x||^2.
The maximiser has the closed form (w_hat + 2 alpha x) / ||w_hat + 2 alpha x||;
an independent projected-gradient oracle is kept for verification.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np
import torch

from perfrank.core.exceptions import ConfigurationError
from perfrank.core.guards import require_same_dim
from perfrank.core.schemas import CandidateList, ItemFeatures, MarketState, UserRep
from perfrank.core.services import DEGENERATE_NORM, make_rng, normalize_rows
from perfrank.agent.schemas import AgentResponse, AudienceVector

logger = logging.getLogger(__name__)


def _user_matrix(users: Union[np.ndarray, Sequence[UserRep]]) -> np.ndarray:
    if isinstance(users, np.ndarray):
        return users
    ordered = sorted(users, key=lambda rep: rep.id)
    return np.stack([rep.u for rep in ordered])


def _candidate_matrix(candidates: Union[np.ndarray, Sequence[CandidateList]]) -> list[Sequence[int]]:
    if isinstance(candidates, np.ndarray):
        return list(candidates)
    return [cands.items for cands in sorted(candidates, key=lambda cl: cl.user_id)]


def audience_vector(
    item_id: int,
    users: Union[np.ndarray, Sequence[UserRep]],
    candidates: Union[np.ndarray, Sequence[CandidateList]],
) -> Optional[AudienceVector]:
    """
    Normalised mean of the current representations of the item's audience.

    Returns:
        The audience vector, or None when the audience is empty or its mean is
        zero (the item is then left unchanged by the agent).
    """
    reps = _user_matrix(users)
    audience = [i for i, items in enumerate(_candidate_matrix(candidates)) if item_id in items]
    if not audience:
        return None

    mean = reps[audience].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < DEGENERATE_NORM:
        logger.warning("item %d: audience mean is zero, leaving item unchanged", item_id)
        return None
    return AudienceVector(item_id=item_id, w_hat=mean / norm, audience_size=len(audience))


def item_utility(x: ItemFeatures, w_hat: AudienceVector) -> float:
    """Creator utility s(x) = w_hat . x, in [-1, 1]."""
    require_same_dim(x.x, w_hat.w_hat, what="item features and audience vector")
    return float(np.dot(w_hat.w_hat, x.x))


def response_objective(x_prime: np.ndarray, x: np.ndarray, w_hat: np.ndarray, alpha: float) -> np.ndarray:
    """w_hat . x' - alpha ||x' - x||^2, vectorised over leading dims of x_prime."""
    return x_prime @ w_hat - alpha * np.sum((x_prime - x) ** 2, axis=-1)


def best_response(x: ItemFeatures, w_hat: AudienceVector, alpha: float) -> ItemFeatures:
    """
    Closed-form best response (w_hat + 2 alpha x) / ||w_hat + 2 alpha x||.

    When the numerator vanishes (w_hat = -2 alpha x) the item is returned unchanged.
    """
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    require_same_dim(x.x, w_hat.w_hat, what="item features and audience vector")

    direction = w_hat.w_hat + 2.0 * alpha * x.x
    norm = np.linalg.norm(direction)
    if norm < DEGENERATE_NORM:
        logger.warning("item %d: degenerate best response, leaving item unchanged", x.id)
        return x
    return ItemFeatures(id=x.id, x=direction / norm)


def oracle_best_response(
    x: ItemFeatures,
    w_hat: AudienceVector,
    alpha: float,
    restarts: int = 8,
    max_iter: int = 10_000,
    seed: int = 0,
) -> ItemFeatures:
    """
    Numerically maximise the creator objective on the unit sphere.

    Projected (Riemannian) gradient ascent from `restarts` starting points (the
    current item, the audience vector and random unit vectors) with a decaying
    step; returns the best feasible point found. Used only to verify the
    closed form.
    """
    d = x.x.size
    rng = make_rng(seed)
    starts = [x.x, w_hat.w_hat] + list(normalize_rows(rng.normal(size=(max(restarts - 2, 0), d)))[0])

    best_point, best_value = x.x, response_objective(x.x, x.x, w_hat.w_hat, alpha)
    base_step = 0.5 / (1.0 + 2.0 * alpha)
    for start in starts[:max(restarts, 2)]:
        point = start / np.linalg.norm(start)
        for t in range(max_iter):
            grad = w_hat.w_hat - 2.0 * alpha * (point - x.x)
            tangent = grad - np.dot(grad, point) * point
            if np.linalg.norm(tangent) < 1e-12 * max(1.0, np.linalg.norm(grad)):
                break
            step = base_step / np.sqrt(1.0 + t / 1000.0)
            moved = point + step * tangent
            point = moved / np.linalg.norm(moved)

        value = response_objective(point, x.x, w_hat.w_hat, alpha)
        if value > best_value:
            best_point, best_value = point, value
    return ItemFeatures(id=x.id, x=best_point)


def audience_sums(users: np.ndarray, candidates: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-item sum of audience representations and audience sizes.

    Returns:
        Tuple of (sums (n, d), counts (n,))
    """
    sums = np.zeros((n, users.shape[1]))
    np.add.at(sums, candidates, users[:, None, :])
    counts = np.bincount(candidates.reshape(-1), minlength=n)
    return sums, counts


def apply_agent(state: MarketState, alpha: float) -> AgentResponse:
    """
    Every item with a non-empty audience moves to its best response to the
    current user representations; the rest keep their features.
    """
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")

    sums, counts = audience_sums(state.users, state.candidates, state.n)
    has_audience = counts > 0
    w_hat, w_norms = normalize_rows(sums / np.maximum(counts, 1)[:, None])
    zero_mean = has_audience & (w_norms < DEGENERATE_NORM)

    responses, r_norms = normalize_rows(w_hat + 2.0 * alpha * state.items)
    degenerate = has_audience & ~zero_mean & (r_norms < DEGENERATE_NORM)
    movable = has_audience & ~zero_mean & ~degenerate

    items = np.where(movable[:, None], responses, state.items)
    displacement = np.linalg.norm(items - state.items, axis=1)

    warnings = int(zero_mean.sum() + degenerate.sum())
    if warnings:
        logger.warning("agent: %d items left unchanged (zero audience mean or degenerate response)", warnings)
    return AgentResponse(
        items=items,
        moved=int(movable.sum()),
        skipped=int((~has_audience).sum()),
        warnings=warnings,
        mean_displacement=float(displacement[movable].mean()) if movable.any() else 0.0,
    )


def anticipate(x: torch.Tensor, w: torch.Tensor, alpha: float) -> torch.Tensor:
    """
    Differentiable best response, batched over leading dims.

    Args:
        x: Current unit-norm item features (..., d)
        w: Unnormalised audience means (..., d); normalised here

    Returns:
        Anticipated features Delta_f(x) (..., d)
    """
    w_hat = w / w.norm(dim=-1, keepdim=True).clamp_min(DEGENERATE_NORM)
    direction = w_hat + 2.0 * alpha * x
    return direction / direction.norm(dim=-1, keepdim=True).clamp_min(DEGENERATE_NORM)
