"""
Domain types shared by every perfrank module.

Vectors are float64 numpy arrays, frozen (read-only) once validated. Collections of
items and users are stored as matrices on MarketState; the per-entity types below
are views used where an operation works on a single item or user.
"""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from perfrank.core.guards import require_finite, require_unit_norm


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ==================== Entities ====================

class ItemFeatures(_ArrayModel):
    """Unit-norm semantic feature vector of one item."""
    id: int = Field(..., ge=0)
    x: np.ndarray

    @field_validator("x", mode="before")
    @classmethod
    def validate_x(cls, v):
        x = require_finite(v, "item features").reshape(-1)
        if x.size == 0:
            raise ValueError("item features must have d > 0")
        return _frozen(require_unit_norm(x, "item features"))


class UserRep(_ArrayModel):
    """Learned user representation (unconstrained norm)."""
    id: int = Field(..., ge=0)
    u: np.ndarray

    @field_validator("u", mode="before")
    @classmethod
    def validate_u(cls, v):
        return _frozen(require_finite(v, "user representation").reshape(-1))


class GroundTruthPref(_ArrayModel):
    """Frozen unit-norm ground-truth preference of one user."""
    id: int = Field(..., ge=0)
    u_star: np.ndarray

    @field_validator("u_star", mode="before")
    @classmethod
    def validate_u_star(cls, v):
        return _frozen(require_unit_norm(np.asarray(v, dtype=np.float64).reshape(-1), "ground-truth preference"))


class CandidateList(BaseModel):
    """The fixed pool of c distinct items from which a user's top-k is drawn."""
    model_config = ConfigDict(frozen=True)

    user_id: int = Field(..., ge=0)
    items: tuple[int, ...] = Field(..., min_length=1)

    @field_validator("items")
    @classmethod
    def validate_items(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("candidate list contains duplicate item ids")
        if any(item < 0 for item in v):
            raise ValueError("candidate item ids must be non-negative")
        return v

    @property
    def c(self) -> int:
        return len(self.items)


class RelevanceVector(_ArrayModel):
    """Simulator relevance of each candidate item, in [0, 1]."""
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v):
        values = require_finite(v, "relevance").reshape(-1)
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("relevance entries must lie in [0, 1]")
        return _frozen(values)


# ==================== Hyperparameters ====================

class HyperParams(BaseModel):
    """
    Hyperparameters of one training protocol.

    Defaults: k=10, T=10, tau1=0.1, tau2=1, lr=0.1,
    100 epochs, batch 64, c-10 training items per user per round.

    The loss is a batch mean and each user owns a representation, so per-user
    gradients carry a 1/batch factor; steps of the default Adam optimiser do
    not depend on it.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    k: int = Field(10, ge=1, description="List cutoff")
    c: int = Field(40, ge=1, description="Candidate list size")
    rounds: int = Field(10, ge=1, description="Number of retraining rounds T")
    epochs: int = Field(100, ge=0)
    learning_rate: float = Field(0.1, gt=0)
    batch_size: int = Field(64, ge=1)
    lambda_: float = Field(0.0, ge=0, alias="lambda", description="Fairness weight")
    alpha: float = Field(1.0, ge=0, description="Modification-cost scale")
    tau1: float = Field(0.1, gt=0, description="DR-NDCG temperature")
    tau2: float = Field(1.0, gt=0, description="DR-Gini temperature")
    sinkhorn_iters: int = Field(30, ge=1)
    sinkhorn_tol: float = Field(1e-6, gt=0)
    seed: int = Field(0, ge=0)
    train_holdout: int = Field(10, ge=0, description="Candidates withheld from training per round")
    user_noise: float = Field(0.1, ge=0, description="Std of the warm-start noise on user reps")
    optimizer: Literal["sgd", "adam"] = "adam"
    detach_agent: bool = False

    @model_validator(mode="after")
    def validate_sizes(self):
        if self.k > self.c:
            raise ValueError(f"k ({self.k}) must not exceed c ({self.c})")
        if self.c - self.train_holdout < self.k:
            raise ValueError(
                f"c ({self.c}) minus train_holdout ({self.train_holdout}) must be at least k ({self.k})"
            )
        return self

    @property
    def training_size(self) -> int:
        return self.c - self.train_holdout


# ==================== Market ====================

class MarketState(_ArrayModel):
    """
    Data of one round: items X^t (n x d), users U^t (m x d), candidate lists C (m x c)
    and ground-truth preferences U* (m x d).

    Candidates and preferences are shared, unchanged, by every round's state.
    """
    round: int = Field(0, ge=0)
    items: np.ndarray
    users: np.ndarray
    candidates: np.ndarray
    prefs: np.ndarray

    @field_validator("items", "users", "prefs", mode="before")
    @classmethod
    def validate_matrix(cls, v, info):
        array = require_finite(v, info.field_name)
        if array.ndim != 2 or array.shape[1] == 0:
            raise ValueError(f"{info.field_name} must be a non-empty 2-D matrix")
        if info.field_name in ("items", "prefs"):
            require_unit_norm(array, info.field_name)
        return v if _is_frozen(v) and v.dtype == np.float64 else _frozen(array)

    @field_validator("candidates", mode="before")
    @classmethod
    def validate_candidates(cls, v):
        array = np.asarray(v)
        if array.ndim != 2 or not np.issubdtype(array.dtype, np.integer):
            raise ValueError("candidates must be a 2-D integer matrix")
        ordered = np.sort(array, axis=1)
        if np.any(ordered[:, 1:] == ordered[:, :-1]):
            raise ValueError("candidate lists must not contain duplicates")
        return v if _is_frozen(v) else _frozen(array.astype(np.int64))

    @model_validator(mode="after")
    def validate_shapes(self):
        n, d = self.items.shape
        m = self.candidates.shape[0]
        if self.users.shape != (m, d) or self.prefs.shape != (m, d):
            raise ValueError(
                f"users {self.users.shape} and prefs {self.prefs.shape} must both be ({m}, {d})"
            )
        if self.candidates.min() < 0 or self.candidates.max() >= n:
            raise ValueError(f"candidate ids must lie in [0, {n})")
        return self

    @property
    def n(self) -> int:
        return self.items.shape[0]

    @property
    def m(self) -> int:
        return self.users.shape[0]

    @property
    def d(self) -> int:
        return self.items.shape[1]

    @property
    def c(self) -> int:
        return self.candidates.shape[1]

    def candidate_list(self, i: int) -> CandidateList:
        return CandidateList(user_id=i, items=tuple(int(j) for j in self.candidates[i]))

    def with_users(self, users: np.ndarray) -> "MarketState":
        return MarketState(round=self.round, items=self.items, users=users,
                           candidates=self.candidates, prefs=self.prefs)

    def advance(self, items: np.ndarray, users: np.ndarray) -> "MarketState":
        """Next round's state; candidates and prefs are carried over as the same arrays."""
        return MarketState(round=self.round + 1, items=items, users=users,
                           candidates=self.candidates, prefs=self.prefs)


def _is_frozen(v) -> bool:
    return isinstance(v, np.ndarray) and not v.flags.writeable
