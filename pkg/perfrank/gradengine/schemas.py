from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class TapeNode(BaseModel):
    """
    One recorded operation of a differentiated computation.

    `op` is the op kind ("Mul", "Softmax", ... or "leaf" for parameters),
    `parents` the nodes it consumed. Shared sub-graphs reuse the same node objects.
    """
    model_config = ConfigDict(frozen=True)

    op: str
    parents: tuple["TapeNode", ...] = ()
    value: Optional[float] = None

    def walk(self) -> list["TapeNode"]:
        """Every node reachable from this one, each listed once, parents after children."""
        seen: set[int] = set()
        order: list[TapeNode] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            order.append(node)
            stack.extend(node.parents)
        return order


class GradientReport(BaseModel):
    """Per-coordinate comparison of reverse-mode gradients against central differences."""
    analytic: list[float]
    numeric: list[float]
    rel_errors: list[float]
    max_rel_error: float
    max_strict_rel_error: float = 0.0
    floor: float = 0.0
    tol: float
    step: float
    non_differentiable: list[int] = Field(default_factory=list)
    passed: bool
