"""
The multi-round training loop.

Each round trains the user representations against the frozen simulator, lets
every item's creator best-respond to them, and evaluates exact metrics on the
full candidate lists of the responded market. Candidate lists and
ground-truth preferences never change between rounds.
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics.pairwise import cosine_similarity

from perfrank.agent.services import anticipate, apply_agent
from perfrank.core.exceptions import ConfigurationError, NonFiniteValueError, RoundDivergenceError
from perfrank.core.guards import require_finite
from perfrank.core.schemas import MarketState
from perfrank.core.services import make_rng
from perfrank.diffrank.schemas import HardPermutation
from perfrank.diffrank.services import SinkhornMonitor, dr_gini, dr_ndcg, exact_gini, exact_ndcg, exact_rank
from perfrank.dynamics.schemas import EpochTrace, Policy, PolicyVariant, RoundOutcome, RoundRecord
from perfrank.gradengine.services import backward
from perfrank.simulator.models import RelevanceModel
from perfrank.simulator.services import DEFAULT_BOUNDARIES, candidate_relevance, category_array, relevance_tensor

logger = logging.getLogger(__name__)


# ==================== Losses ====================

def _loss_terms(
    users: torch.Tensor,
    x_c: torch.Tensor,
    r: torch.Tensor,
    prefs: torch.Tensor,
    other_sums: torch.Tensor,
    counts: torch.Tensor,
    model: RelevanceModel,
    policy: Policy,
    monitor: Optional[SinkhornMonitor] = None,
) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """
    Per-user losses for a batch.

    Args:
        users: (B, d) live representations
        x_c: (B, c', d) current features of each user's training candidates
        r: (B, c') simulator relevance of those candidates
        prefs: (B, d) ground-truth preferences
        other_sums: (B, c', d) summed representations of the rest of each candidate's audience
        counts: (B, c') audience size of each candidate

    Returns:
        Tuple of (loss (B,), DR-NDCG (B,), DR-Gini (B,) or None without a fairness term)
    """
    hyper = policy.hyper
    scores = (x_c @ users.unsqueeze(-1)).squeeze(-1)
    ndcg = dr_ndcg(scores, r, hyper.k, hyper.tau1, hyper.sinkhorn_iters, hyper.sinkhorn_tol, monitor)
    if hyper.lambda_ == 0:
        return -ndcg, ndcg, None

    if policy.variant == PolicyVariant.AGENT_BASED:
        w = (other_sums + users.unsqueeze(-2)) / counts.unsqueeze(-1)
        if hyper.detach_agent:
            w = w.detach()
        x_next = anticipate(x_c, w, hyper.alpha)
        gini_scores = (x_next @ users.unsqueeze(-1)).squeeze(-1)
        gini_relevance = relevance_tensor(model, x_next, prefs.unsqueeze(-2))
    else:
        gini_scores, gini_relevance = scores, r

    gini = dr_gini(gini_scores, gini_relevance, hyper.k, hyper.tau2, hyper.sinkhorn_iters, hyper.sinkhorn_tol, monitor)
    return -(ndcg + hyper.lambda_ * gini), ndcg, gini


def user_loss(
    u_i: torch.Tensor,
    cands: Sequence[int],
    items,
    u_star,
    model: RelevanceModel,
    policy: Policy,
    audience: Optional[tuple[torch.Tensor, torch.Tensor]] = None,
    monitor: Optional[SinkhornMonitor] = None,
) -> torch.Tensor:
    """
    Training loss of one user, negated for minimisation.

    agent_based:      -(DR-NDCG on current items + lambda DR-Gini on anticipated items)
    non_agent:        -(DR-NDCG + lambda DR-Gini, both on current items)
    accuracy_only/mmr: -DR-NDCG

    Args:
        u_i: (d,) representation, usually requiring grad
        cands: The user's training candidates (item ids)
        items: (n, d) current item features
        u_star: (d,) ground-truth preference
        audience: Per-candidate (summed representations of the other audience
            members (c', d), audience sizes (c',)); without it each candidate's
            audience is the user alone

    Returns:
        Scalar loss tensor
    """
    x_c = torch.tensor(np.asarray(items, dtype=np.float64))[torch.tensor(np.asarray(cands, dtype=np.int64))]
    prefs = torch.tensor(np.asarray(u_star, dtype=np.float64)).reshape(1, -1)
    with torch.no_grad():
        r = relevance_tensor(model, x_c, prefs)

    if audience is None:
        other_sums, counts = torch.zeros_like(x_c), torch.ones(x_c.shape[0], dtype=torch.float64)
    else:
        other_sums, counts = audience

    loss, _, _ = _loss_terms(
        u_i.unsqueeze(0), x_c.unsqueeze(0), r.unsqueeze(0), prefs,
        other_sums.unsqueeze(0), counts.unsqueeze(0), model, policy, monitor,
    )
    return loss[0]


# ==================== Training ====================

def training_subsets(candidates: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random `size`-subset of each user's candidates, (m, size)."""
    order = np.argsort(rng.random(candidates.shape), axis=1)[:, :size]
    return np.take_along_axis(candidates, order, axis=1)


def _optimizer(policy: Policy, params: list[torch.Tensor]) -> torch.optim.Optimizer:
    if policy.hyper.optimizer == "adam":
        return torch.optim.Adam(params, lr=policy.hyper.learning_rate)
    return torch.optim.SGD(params, lr=policy.hyper.learning_rate)


def _audience_sums(users: torch.Tensor, flat_candidates: torch.Tensor, c: int, n: int) -> torch.Tensor:
    sums = torch.zeros(n, users.shape[1], dtype=users.dtype)
    return sums.index_add_(0, flat_candidates, users.repeat_interleave(c, dim=0))


def train_round(
    state: MarketState,
    policy: Policy,
    model: RelevanceModel,
    monitor: Optional[SinkhornMonitor] = None,
) -> RoundOutcome:
    """
    One round of training followed by the creators' response.

    Training subsets are drawn once per round from the round's sub-seed; users
    are shuffled every epoch and updated once per batch. Each epoch starts
    from a snapshot of the representations for the audience vectors; the
    user whose loss is built contributes live. non_retraining skips training.

    Raises:
        RoundDivergenceError: If a loss or gradient becomes non-finite
    """
    hyper = policy.hyper
    if hyper.c != state.c:
        raise ConfigurationError(f"policy c ({hyper.c}) does not match the market's c ({state.c})")

    trace: list[EpochTrace] = []
    users = state.users
    if policy.trains and hyper.epochs > 0:
        users, trace = _fit_users(state, policy, model, monitor)

    response = apply_agent(state.with_users(users), hyper.alpha)
    return RoundOutcome(users=users, response=response, trace=trace)


def _fit_users(
    state: MarketState,
    policy: Policy,
    model: RelevanceModel,
    monitor: Optional[SinkhornMonitor],
) -> tuple[np.ndarray, list[EpochTrace]]:
    hyper = policy.hyper
    rng = make_rng(hyper.seed, state.round)
    subsets = torch.from_numpy(training_subsets(state.candidates, hyper.training_size, rng))

    X = torch.tensor(state.items)
    prefs = torch.tensor(state.prefs)
    flat = torch.tensor(state.candidates.reshape(-1))
    counts = torch.bincount(flat, minlength=state.n).to(torch.float64)[subsets]
    x_c = X[subsets]
    with torch.no_grad():
        r = relevance_tensor(model, x_c, prefs.unsqueeze(1))

    U = torch.tensor(state.users, dtype=torch.float64, requires_grad=True)
    optimizer = _optimizer(policy, [U])

    trace = []
    for epoch in range(1, hyper.epochs + 1):
        with torch.no_grad():
            snapshot = U.detach().clone()
            sums = _audience_sums(snapshot, flat, state.c, state.n)

        totals = {"loss": 0.0, "ndcg": 0.0, "gini": 0.0}
        for batch in np.array_split(rng.permutation(state.m), max(1, -(-state.m // hyper.batch_size))):
            idx = torch.from_numpy(batch)
            other = sums[subsets[idx]] - snapshot[idx].unsqueeze(1)
            losses, ndcg, gini = _loss_terms(
                U[idx], x_c[idx], r[idx], prefs[idx], other, counts[idx], model, policy, monitor,
            )
            loss = losses.mean()
            try:
                grads = backward(loss, {"users": U})
            except NonFiniteValueError as exc:
                raise RoundDivergenceError(policy.name, state.round + 1, f"{exc.detail} (epoch {epoch})") from exc

            optimizer.zero_grad()
            U.grad = grads["users"]
            optimizer.step()

            totals["loss"] += float(losses.detach().sum())
            totals["ndcg"] += float(ndcg.detach().sum())
            totals["gini"] += float(gini.detach().sum()) if gini is not None else 0.0

        trace.append(EpochTrace(
            epoch=epoch,
            loss=totals["loss"] / state.m,
            dr_ndcg=totals["ndcg"] / state.m,
            dr_gini=totals["gini"] / state.m if hyper.lambda_ > 0 else None,
        ))
        logger.debug("%s round %d epoch %d: loss %.5f", policy.name, state.round + 1, epoch, trace[-1].loss)

    return U.detach().numpy().copy(), trace


# ==================== Evaluation ====================

def mmr_rerank(pred_scores, item_features, k: int, beta: float) -> HardPermutation:
    """
    Greedy maximal-marginal-relevance selection of k items.

    Each step picks argmax of beta * score - (1 - beta) * (max cosine
    similarity to the already-selected items); the first pick is the top-scored
    item and ties go to the lowest index. The remaining items follow in score
    order, so the first k entries of the returned permutation are the MMR list.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError(f"mmr beta must lie in [0, 1], got {beta}")
    scores = require_finite(pred_scores, "scores").reshape(-1)
    c = scores.size
    if not 1 <= k <= c:
        raise ConfigurationError(f"k ({k}) must lie in [1, c ({c})]")

    similarity = cosine_similarity(np.asarray(item_features, dtype=np.float64))
    selected = [int(np.argmax(scores))]
    chosen = np.zeros(c, dtype=bool)
    chosen[selected[0]] = True
    while len(selected) < k:
        redundancy = similarity[:, selected].max(axis=1)
        marginal = np.where(chosen, -np.inf, beta * scores - (1.0 - beta) * redundancy)
        pick = int(np.argmax(marginal))
        selected.append(pick)
        chosen[pick] = True

    rest = [j for j in exact_rank(scores).perm if not chosen[j]]
    return HardPermutation(perm=np.array(selected + rest, dtype=np.int64))


def ranking_metrics(
    relevance: np.ndarray,
    perms: Sequence[np.ndarray],
    candidate_categories: np.ndarray,
    k: int,
) -> tuple[float, float, tuple[float, ...]]:
    """
    Mean exact NDCG@k, mean exact Gini@k, and the mean number of top-k items
    per popularity category (1..5) over users.
    """
    ndcg = [exact_ndcg(relevance[i], perm, k) for i, perm in enumerate(perms)]
    gini = [exact_gini(relevance[i], perm, k) for i, perm in enumerate(perms)]
    top = np.stack([candidate_categories[i][np.asarray(perm)[:k]] for i, perm in enumerate(perms)])
    counts = np.stack([(top == category).sum(axis=1) for category in range(1, 6)], axis=1)
    return float(np.mean(ndcg)), float(np.mean(gini)), tuple(float(v) for v in counts.mean(axis=0))


def evaluate_state(
    state: MarketState,
    model: RelevanceModel,
    policy: Policy,
    categories: np.ndarray,
) -> tuple[float, float, tuple[float, ...]]:
    """Rank every user's full candidate list with the state's users and score it exactly."""
    relevance = candidate_relevance(model, state)
    features = state.items[state.candidates]
    scores = np.einsum("icd,id->ic", features, state.users)

    if policy.variant == PolicyVariant.MMR:
        perms = [mmr_rerank(scores[i], features[i], policy.hyper.k, policy.mmr_beta).perm for i in range(state.m)]
    else:
        perms = [exact_rank(scores[i]).perm for i in range(state.m)]
    return ranking_metrics(relevance, perms, categories[state.candidates], policy.hyper.k)


def run_dynamics(
    state: MarketState,
    policy: Policy,
    model: RelevanceModel,
    rounds: Optional[int] = None,
    boundaries: Sequence[float] = DEFAULT_BOUNDARIES,
    on_round: Optional[Callable[[RoundRecord, RoundOutcome], None]] = None,
) -> list[RoundRecord]:
    """
    Run T rounds of training and agent response, evaluating after each.

    Round t (1-based) is scored with the representations trained in that round
    on the items the creators produced in response to them, which are also
    the next round's training items.
    """
    rounds = policy.hyper.rounds if rounds is None else rounds
    if rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
    categories = category_array(state.candidates, state.n, boundaries)

    records: list[RoundRecord] = []
    for t in range(1, rounds + 1):
        monitor = SinkhornMonitor()
        outcome = train_round(state, policy, model, monitor)
        following = state.advance(outcome.items, outcome.users)
        ndcg, gini, freq = evaluate_state(following, model, policy, categories)
        record = RoundRecord(
            policy=policy.name,
            round=t,
            mean_ndcg_at_k=ndcg,
            mean_gini_at_k=gini,
            category_freq=freq,
            warnings=outcome.response.warnings + monitor.nonconverged,
        )
        records.append(record)
        logger.info("%s round %d: ndcg@%d %.4f, gini@%d %.4f", policy.name, t, policy.hyper.k, ndcg, policy.hyper.k, gini)
        if on_round is not None:
            on_round(record, outcome)
        state = following
    return records
