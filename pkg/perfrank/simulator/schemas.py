from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class InteractionLog(BaseModel):
    """Rows of (user id, item id, binary label[, timestamp])."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    user_ids: np.ndarray
    item_ids: np.ndarray
    labels: np.ndarray
    timestamps: Optional[np.ndarray] = None

    @field_validator("user_ids", "item_ids", mode="before")
    @classmethod
    def validate_ids(cls, v, info):
        ids = np.asarray(v, dtype=np.int64).reshape(-1)
        if ids.size and ids.min() < 0:
            raise ValueError(f"{info.field_name} must be non-negative")
        return ids

    @field_validator("labels", mode="before")
    @classmethod
    def validate_labels(cls, v):
        labels = np.asarray(v).reshape(-1)
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary (0 or 1)")
        return labels.astype(np.int8)

    @model_validator(mode="after")
    def validate_lengths(self):
        lengths = {self.user_ids.size, self.item_ids.size, self.labels.size}
        if self.timestamps is not None:
            lengths.add(np.asarray(self.timestamps).size)
        if len(lengths) != 1:
            raise ValueError("interaction columns must have equal lengths")
        return self

    def __len__(self) -> int:
        return int(self.labels.size)


class EncodingRule(BaseModel):
    """How one raw item column becomes numeric features."""
    model_config = ConfigDict(extra="forbid")

    rule: Literal["onehot", "minmax", "graded"]
    # Ordered levels for graded columns; sorted unique values when omitted
    levels: Optional[list] = None


class PreprocessingManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    columns: dict[str, EncodingRule] = Field(default_factory=dict)


class RowError(BaseModel):
    file: str
    row: Optional[int] = None
    message: str


class LoadReport(BaseModel):
    """Aggregated outcome of CSV ingestion."""
    items_loaded: int = 0
    users_loaded: int = 0
    dropped_users: int = 0
    feature_columns: list[str] = Field(default_factory=list)
    user_ids: list[str] = Field(default_factory=list, description="Original id of each loaded user, by index")
    item_ids: list[str] = Field(default_factory=list, description="Original id of each loaded item, by index")
    errors: list[RowError] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


class TrainingReport(BaseModel):
    """Outcome of fitting the relevance simulator."""
    epochs: int
    train_size: int
    val_size: int
    test_size: int
    final_train_loss: float
    best_val_accuracy: float
    test_accuracy: float


class ModelFile(BaseModel):
    """Header stored alongside saved simulator weights."""
    format: Literal["perfrank-relevance"] = "perfrank-relevance"
    version: int = 1
    d: int
    layer_shapes: list[list[int]]
