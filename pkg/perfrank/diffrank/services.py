"""
Exact and differentiable ranking operators.

Exact operators work on numpy arrays and drive evaluation; relaxed operators work
on float64 torch tensors (with optional leading batch dims) and drive training.
DCG discounts use log base 2 everywhere.
"""

import logging
from typing import Optional, Union

import numpy as np
import torch

from perfrank.core.exceptions import AmbiguousRankingError, ConfigurationError
from perfrank.core.guards import require_finite, require_positive
from perfrank.core.schemas import RelevanceVector
from perfrank.diffrank.schemas import HardPermutation, RelaxedPermutation

logger = logging.getLogger(__name__)

DEFAULT_SINKHORN_ITERS = 30
DEFAULT_SINKHORN_TOL = 1e-6
_TINY = torch.finfo(torch.float64).tiny

ArrayLike = Union[np.ndarray, list, RelevanceVector]


class SinkhornMonitor:
    """Counts Sinkhorn-scaled matrices and how many missed the tolerance."""

    def __init__(self):
        self.matrices = 0
        self.nonconverged = 0

    def record(self, relaxed: RelaxedPermutation) -> None:
        self.matrices += int(np.prod(relaxed.P_hat.shape[:-2], dtype=np.int64))
        self.nonconverged += relaxed.nonconverged


def _values(r: ArrayLike) -> np.ndarray:
    if isinstance(r, RelevanceVector):
        return r.values
    return require_finite(r, "relevance").reshape(-1)


def _perm(pi: Union[HardPermutation, np.ndarray]) -> np.ndarray:
    return pi.perm if isinstance(pi, HardPermutation) else np.asarray(pi, dtype=np.int64)


def _as_tensor(values) -> torch.Tensor:
    if isinstance(values, RelevanceVector):
        values = values.values
    if isinstance(values, torch.Tensor):
        return values if values.dtype == torch.float64 else values.to(torch.float64)
    return torch.tensor(np.asarray(values, dtype=np.float64))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))


def _check_cutoff(k: int, c: int) -> None:
    if not 1 <= k <= c:
        raise ConfigurationError(f"k ({k}) must lie in [1, c ({c})]")


# ==================== Exact operators ====================

def exact_rank(scores) -> HardPermutation:
    """Descending order by score; ties keep ascending original index."""
    values = require_finite(scores, "scores").reshape(-1)
    return HardPermutation(perm=np.argsort(-values, kind="stable"))


def hard_perm_matrix(r) -> np.ndarray:
    """
    Deterministic permutation matrix: P[p, q] = 1 iff
    q = argmax[(c + 1 - 2p) r - A 1] with A[p, q] = |r_p - r_q|.

    Raises:
        AmbiguousRankingError: If r has duplicate entries
    """
    r = require_finite(r, "scores").reshape(-1)
    c = r.size
    if np.unique(r).size != c:
        raise AmbiguousRankingError("ambiguous argmax: scores contain duplicates")

    row_sums = np.abs(r[:, None] - r[None, :]).sum(axis=1)
    scaling = c + 1 - 2 * np.arange(1, c + 1, dtype=np.float64)
    logits = scaling[:, None] * r[None, :] - row_sums[None, :]

    P = np.zeros((c, c), dtype=np.float64)
    P[np.arange(c), np.argmax(logits, axis=1)] = 1.0
    return P


def exact_dcg(r: ArrayLike, pi: Union[HardPermutation, np.ndarray], k: int) -> float:
    """Sum over positions 1..k of (2^r - 1) / log2(1 + position)."""
    values = _values(r)
    perm = _perm(pi)
    _check_cutoff(k, values.size)
    gains = np.exp2(values[perm[:k]]) - 1.0
    return float(np.sum(gains * _discounts(k)))


def exact_ndcg(r: ArrayLike, pi: Union[HardPermutation, np.ndarray], k: int) -> float:
    """
    DCG of the ranking over DCG of the ideal (descending) ranking.

    An all-zero relevance vector has ideal DCG 0; the list then counts as
    perfectly ranked and scores 1.0.
    """
    values = _values(r)
    ideal = exact_dcg(values, np.argsort(-values, kind="stable"), k)
    if ideal <= 0.0:
        logger.debug("ideal DCG is zero; treating list as perfectly ranked")
        return 1.0
    return float(np.clip(exact_dcg(values, pi, k) / ideal, 0.0, 1.0))


def exact_gini(r: ArrayLike, pi: Union[HardPermutation, np.ndarray], k: int) -> float:
    """
    Gini coefficient of the top-k relevances:
    sum_l (2l - k - 1) y_l / (k sum_l y_l) with y sorted ascending.

    Zero total relevance in the top-k gives 0.0.
    """
    values = _values(r)
    _check_cutoff(k, values.size)
    top = np.sort(values[_perm(pi)[:k]])
    total = top.sum()
    if total <= 0.0:
        return 0.0
    weights = 2.0 * np.arange(1, k + 1, dtype=np.float64) - k - 1
    return float(np.clip(np.dot(weights, top) / (k * total), 0.0, 1.0))


# ==================== Relaxed operators ====================

def _relaxed_logits(r: torch.Tensor) -> torch.Tensor:
    c = r.shape[-1]
    row_sums = (r.unsqueeze(-1) - r.unsqueeze(-2)).abs().sum(dim=-1)
    scaling = c + 1 - 2 * torch.arange(1, c + 1, dtype=r.dtype)
    return scaling.unsqueeze(-1) * r.unsqueeze(-2) - row_sums.unsqueeze(-2)


def build_relaxed(r, tau: float) -> RelaxedPermutation:
    """Row p of P_hat = softmax[((c + 1 - 2p) r - A 1) / tau]."""
    require_positive(tau, "tau")
    scores = _as_tensor(r)
    return RelaxedPermutation(P_hat=torch.softmax(_relaxed_logits(scores) / tau, dim=-1), tau=tau)


def _deviation(matrix: torch.Tensor) -> torch.Tensor:
    """Per-matrix max |row sum - 1| and |column sum - 1| (detached)."""
    with torch.no_grad():
        rows = (matrix.sum(dim=-1) - 1.0).abs().amax(dim=-1)
        cols = (matrix.sum(dim=-2) - 1.0).abs().amax(dim=-1)
        return torch.maximum(rows, cols)


def sinkhorn_scale(
    P_hat: Union[RelaxedPermutation, torch.Tensor],
    iters: int = DEFAULT_SINKHORN_ITERS,
    tol: float = DEFAULT_SINKHORN_TOL,
    early_stop: bool = True,
) -> RelaxedPermutation:
    """
    Alternate row and column normalisation of a positive matrix.

    With `early_stop`, iteration ends once every row and column sum is within
    `tol` of 1 (an input that already satisfies this is returned unchanged).
    Without it, exactly `iters` iterations run, which keeps the executed graph
    independent of the data for differentiation.

    Non-convergence is not fatal: the last iterate is returned and the number of
    offending matrices is reported in `nonconverged`.
    """
    if isinstance(P_hat, RelaxedPermutation):
        matrix, tau = P_hat.P_hat, P_hat.tau
    else:
        matrix, tau = P_hat, 1.0

    iterations = 0
    if not (early_stop and bool(_deviation(matrix).max() < tol)):
        for _ in range(iters):
            matrix = matrix / matrix.sum(dim=-1, keepdim=True).clamp_min(_TINY)
            matrix = matrix / matrix.sum(dim=-2, keepdim=True).clamp_min(_TINY)
            iterations += 1
            if early_stop and bool(_deviation(matrix).max() < tol):
                break

    deviation = _deviation(matrix)
    nonconverged = int((deviation >= tol).sum())
    if nonconverged:
        logger.debug("sinkhorn: %d matrices above tol %.1e after %d iterations", nonconverged, tol, iterations)
    return RelaxedPermutation(
        P_hat=matrix,
        tau=tau,
        scaled=True,
        iterations=iterations,
        max_deviation=float(deviation.max()),
        nonconverged=nonconverged,
    )


def soft_permute(
    pred_scores,
    values,
    tau: float,
    iters: int = DEFAULT_SINKHORN_ITERS,
    tol: float = DEFAULT_SINKHORN_TOL,
    monitor: Optional[SinkhornMonitor] = None,
) -> torch.Tensor:
    """scale(P_hat(pred_scores)) applied to `values`: a soft sort of values by predicted score."""
    relaxed = sinkhorn_scale(build_relaxed(pred_scores, tau), iters, tol, early_stop=False)
    if monitor is not None:
        monitor.record(relaxed)
    return (relaxed.P_hat @ _as_tensor(values).unsqueeze(-1)).squeeze(-1)


def dr_ndcg(
    pred_scores,
    r_true,
    k: int,
    tau1: float,
    iters: int = DEFAULT_SINKHORN_ITERS,
    tol: float = DEFAULT_SINKHORN_TOL,
    monitor: Optional[SinkhornMonitor] = None,
) -> torch.Tensor:
    """
    Differentiable NDCG@k: the relaxed permutation built from predicted scores is
    applied to ground-truth gains 2^r - 1, discounted by 1 / log2(1 + position),
    and normalised by the ideal DCG of r_true.
    """
    relevance = _as_tensor(r_true)
    _check_cutoff(k, relevance.shape[-1])
    gains = torch.exp2(relevance) - 1.0
    discounts = torch.tensor(_discounts(k))

    permuted = soft_permute(pred_scores, gains, tau1, iters, tol, monitor)
    dcg = (permuted[..., :k] * discounts).sum(dim=-1)
    ideal = (torch.sort(gains, dim=-1, descending=True).values[..., :k] * discounts).sum(dim=-1)

    valid = ideal > 0
    safe_ideal = torch.where(valid, ideal, torch.ones_like(ideal))
    return torch.where(valid, dcg / safe_ideal, torch.ones_like(dcg))


def dr_gini(
    pred_scores,
    r_true,
    k: int,
    tau2: float,
    iters: int = DEFAULT_SINKHORN_ITERS,
    tol: float = DEFAULT_SINKHORN_TOL,
    monitor: Optional[SinkhornMonitor] = None,
) -> torch.Tensor:
    """
    Differentiable Gini over the first k rows of scale(P_hat) . r:
    (1 / (mean * k^2)) sum_p sum_q |y_p - y_q|.

    This pairwise form equals twice the sorted-form Gini of exact_gini in the
    hard limit. A zero mean gives 0.
    """
    relevance = _as_tensor(r_true)
    _check_cutoff(k, relevance.shape[-1])

    top = soft_permute(pred_scores, relevance, tau2, iters, tol, monitor)[..., :k]
    mean = top.mean(dim=-1)
    spread = (top.unsqueeze(-1) - top.unsqueeze(-2)).abs().sum(dim=(-2, -1))

    valid = mean > 0
    safe_mean = torch.where(valid, mean, torch.ones_like(mean))
    return torch.where(valid, spread / (safe_mean * k * k), torch.zeros_like(spread))
