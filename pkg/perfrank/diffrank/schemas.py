import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator


class HardPermutation(BaseModel):
    """perm[l] is the index of the item ranked at position l (position 0 is best)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    perm: np.ndarray

    @field_validator("perm", mode="before")
    @classmethod
    def validate_perm(cls, v):
        perm = np.asarray(v, dtype=np.int64).reshape(-1)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("perm must be a bijection on [0, c)")
        perm.setflags(write=False)
        return perm

    @property
    def c(self) -> int:
        return int(self.perm.size)


class RelaxedPermutation(BaseModel):
    """
    Row-stochastic relaxation of a sorting permutation (doubly stochastic after
    Sinkhorn scaling). May carry leading batch dimensions: shape (..., c, c).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P_hat: torch.Tensor
    tau: float = Field(..., gt=0)
    scaled: bool = False
    iterations: int = 0
    max_deviation: float = 0.0
    # Number of matrices in the batch whose row/column sums missed the tolerance
    nonconverged: int = 0

    @field_validator("P_hat")
    @classmethod
    def validate_shape(cls, v):
        if v.ndim < 2 or v.shape[-1] != v.shape[-2]:
            raise ValueError(f"P_hat must be square in its last two dims, got {tuple(v.shape)}")
        return v

    @property
    def converged(self) -> bool:
        return self.nonconverged == 0
