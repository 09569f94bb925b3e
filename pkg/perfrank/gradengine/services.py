"""
Reverse-mode differentiation of perfrank losses.

Losses are composed from float64 torch operations; this module turns the recorded
graph into gradient maps, names the op kind responsible for non-finite values,
and checks gradients against central finite differences.
"""

import logging
import re
from typing import Callable, Mapping

import numpy as np
import torch

from perfrank.core.exceptions import NonFiniteValueError
from perfrank.gradengine.schemas import GradientReport, TapeNode

logger = logging.getLogger(__name__)

_BACKWARD_SUFFIX = re.compile(r"Backward\d*$")
_ANOMALY_OP = re.compile(r"Function '(\w+?)Backward\d*'")


def _op_kind(fn) -> str:
    name = type(fn).__name__
    if name == "AccumulateGrad":
        return "leaf"
    return _BACKWARD_SUFFIX.sub("", name)


def trace(loss: torch.Tensor) -> TapeNode:
    """
    Snapshot the graph recorded behind `loss` as TapeNodes.

    Nodes are memoised by identity, so the result is a DAG sharing sub-graphs the
    way the executed computation did.
    """
    root_value = float(loss.detach()) if loss.numel() == 1 else None
    if loss.grad_fn is None:
        return TapeNode(op="constant", value=root_value)

    # Iterative post-order: build parents before children
    built: dict[int, TapeNode] = {}
    stack = [(loss.grad_fn, False)]
    while stack:
        fn, expanded = stack.pop()
        key = id(fn)
        if key in built:
            continue
        parents = [parent for parent, _ in fn.next_functions if parent is not None]
        if not expanded:
            stack.append((fn, True))
            stack.extend((parent, False) for parent in parents if id(parent) not in built)
            continue
        built[key] = TapeNode(
            op=_op_kind(fn),
            parents=tuple(built[id(parent)] for parent in parents),
            value=root_value if fn is loss.grad_fn else None,
        )
    return built[id(loss.grad_fn)]


def _locate_non_finite(loss: torch.Tensor, params: list[torch.Tensor]) -> str:
    """Re-run the backward pass in anomaly mode to name the op that produced NaN/inf."""
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    except RuntimeError as exc:
        match = _ANOMALY_OP.search(str(exc))
        if match:
            return match.group(1)
    return trace(loss).op


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """
    Exact reverse-mode gradients of a scalar loss.

    Args:
        loss: Scalar tensor produced by a completed forward pass
        params: Parameter id -> tensor; tensors that do not require grad (frozen
            parameters) or do not reach the loss receive zero gradients

    Returns:
        Parameter id -> detached gradient tensor with the parameter's shape.
        The graph is retained, so calling backward twice gives identical maps.

    Raises:
        NonFiniteValueError: If the loss or any gradient is NaN or infinite
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss.detach()).all():
        raise NonFiniteValueError(trace(loss).op, f"loss is non-finite ({float(loss.detach())})")

    names = list(params)
    live = [name for name in names if params[name].requires_grad]
    grads = {name: torch.zeros_like(params[name]).detach() for name in names}
    if not live or loss.grad_fn is None:
        return grads

    computed = torch.autograd.grad(loss, [params[name] for name in live], retain_graph=True, allow_unused=True)
    for name, grad in zip(live, computed):
        if grad is not None:
            grads[name] = grad.detach()

    if not all(torch.isfinite(grads[name]).all() for name in live):
        op = _locate_non_finite(loss, [params[name] for name in live])
        raise NonFiniteValueError(op)
    return grads


def check_gradients(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradientReport:
    """
    Compare backward() against central differences at `point`.

    The relative error of coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, s),
    where the floor s is 1e-3 times the largest gradient entry; coordinates far
    below the gradient's scale are judged against that scale, and `passed`
    uses these errors. The report also carries the unfloored maximum,
    |a_i - n_i| / max(|a_i|, |n_i|) over coordinates that are not both zero.

    A coordinate is flagged non-differentiable when its one-sided differences
    disagree by an amount that does not shrink with the step (a kink).
    The check passes iff the max relative error is below `tol` and no
    coordinate is flagged.
    """
    base = torch.as_tensor(np.asarray(point, dtype=np.float64)).clone()
    variable = base.clone().requires_grad_(True)
    analytic = backward(fn(variable), {"point": variable})["point"].reshape(-1).numpy()

    flat = base.reshape(-1)
    numeric = np.zeros(flat.numel())
    kinks: list[int] = []
    with torch.no_grad():
        f0 = float(fn(base))

        def shifted(i: int, h: float) -> float:
            moved = flat.clone()
            moved[i] += h
            return float(fn(moved.reshape(base.shape)))

        for i in range(flat.numel()):
            plus, minus = shifted(i, step), shifted(i, -step)
            numeric[i] = (plus - minus) / (2.0 * step)

            gap = abs((plus - f0) / step - (f0 - minus) / step)
            if gap > 1e-6 * max(1.0, abs(numeric[i])):
                small = step / 10.0
                small_gap = abs((shifted(i, small) - f0) / small - (f0 - shifted(i, -small)) / small)
                if small_gap > 0.5 * gap:
                    kinks.append(i)

    scale = 1e-3 * max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(scale, 1e-300))
    diff = np.abs(analytic - numeric)
    rel_errors = diff / denom
    max_rel = float(rel_errors.max(initial=0.0))
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    strict = np.divide(diff, magnitude, out=np.zeros_like(diff), where=magnitude > 0)

    if kinks:
        logger.debug("gradient check: non-differentiable coordinates %s", kinks)
    return GradientReport(
        analytic=analytic.tolist(),
        numeric=numeric.tolist(),
        rel_errors=rel_errors.tolist(),
        max_rel_error=max_rel,
        max_strict_rel_error=float(strict.max(initial=0.0)),
        floor=scale,
        tol=tol,
        step=step,
        non_differentiable=kinks,
        passed=max_rel < tol and not kinks,
    )
