import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from perfrank.core.guards import require_unit_norm


class AudienceVector(BaseModel):
    """Normalised mean representation of the users whose candidate lists hold the item."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    item_id: int = Field(..., ge=0)
    w_hat: np.ndarray
    audience_size: int = Field(..., ge=0)

    @field_validator("w_hat", mode="before")
    @classmethod
    def validate_w_hat(cls, v):
        w_hat = require_unit_norm(np.asarray(v, dtype=np.float64).reshape(-1), "audience vector")
        w_hat.setflags(write=False)
        return w_hat


class AgentResponse(BaseModel):
    """Outcome of one round of creator best responses: the item set X^{t+1}."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    items: np.ndarray
    moved: int = Field(..., ge=0)
    skipped: int = Field(..., ge=0, description="Items with an empty audience")
    warnings: int = Field(..., ge=0, description="Zero audience means or degenerate responses")
    mean_displacement: float = Field(..., ge=0, description="Mean ||x' - x|| over moved items")
