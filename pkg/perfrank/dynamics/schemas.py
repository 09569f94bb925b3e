from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator

from perfrank.agent.schemas import AgentResponse
from perfrank.core.schemas import HyperParams


class PolicyVariant(str, Enum):
    AGENT_BASED = "agent_based"
    NON_AGENT = "non_agent"
    ACCURACY_ONLY = "accuracy_only"
    MMR = "mmr"
    NON_RETRAINING = "non_retraining"


# Variants whose loss carries no fairness term
UNREGULARISED = {PolicyVariant.ACCURACY_ONLY, PolicyVariant.MMR}


class Policy(BaseModel):
    """One compared method: a loss variant with its hyperparameters."""
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1)
    variant: PolicyVariant
    hyper: HyperParams = Field(default_factory=HyperParams)
    mmr_beta: float = Field(0.5, ge=0.0, le=1.0, description="Relevance weight of the MMR re-ranker")

    @field_validator("hyper")
    @classmethod
    def force_lambda(cls, v: HyperParams, info: ValidationInfo):
        if info.data.get("variant") in UNREGULARISED and v.lambda_ != 0:
            return v.model_copy(update={"lambda_": 0.0})
        return v

    @property
    def trains(self) -> bool:
        return self.variant != PolicyVariant.NON_RETRAINING


class EpochTrace(BaseModel):
    """Mean training quantities over the users of one epoch."""
    epoch: int = Field(..., ge=1)
    loss: float
    dr_ndcg: float
    # None when the loss carries no fairness term
    dr_gini: Optional[float] = None


class RoundOutcome(BaseModel):
    """Result of one train_round: trained users U^t, the agent's X^{t+1}, and the epoch trace."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    users: np.ndarray
    response: AgentResponse
    trace: list[EpochTrace] = Field(default_factory=list)

    @property
    def items(self) -> np.ndarray:
        return self.response.items


class RoundRecord(BaseModel):
    """Evaluation of one policy after one round, as written to metrics.csv."""
    model_config = ConfigDict(frozen=True)

    policy: str
    round: int = Field(..., ge=0)
    mean_ndcg_at_k: float = Field(..., ge=0.0, le=1.0)
    mean_gini_at_k: float = Field(..., ge=0.0, le=1.0)
    category_freq: tuple[float, float, float, float, float]
    warnings: int = Field(0, ge=0)

    @field_validator("category_freq")
    @classmethod
    def validate_freq(cls, v):
        if any(value < 0 for value in v):
            raise ValueError("category frequencies must be non-negative")
        return v
