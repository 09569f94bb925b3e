"""
Schemas for experiment configuration and reports.
"""

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from perfrank.core.exceptions import ConfigurationError
from perfrank.core.schemas import HyperParams
from perfrank.dynamics.schemas import Policy, PolicyVariant


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ==================== Data sources ====================

class SyntheticSource(_Strict):
    """Seeded synthetic market; c comes from hyper."""
    kind: Literal["synthetic"] = "synthetic"
    m: int = Field(60, ge=1, description="Number of users")
    n: int = Field(200, ge=1, description="Number of items")
    d: int = Field(16, ge=2, description="Feature dimension")
    popularity_skew: float = Field(1.2, ge=0)


class CsvSource(_Strict):
    """items.csv + interactions.csv, optionally encoded through a preprocessing manifest."""
    kind: Literal["csv"]
    items: Path
    interactions: Path
    manifest: Optional[Path] = None
    min_interactions: Optional[int] = Field(None, ge=1)
    candidate_policy: Literal["first", "random"] = "first"

    def resolved(self, base: Path) -> "CsvSource":
        def resolve(path: Optional[Path]) -> Optional[Path]:
            return None if path is None else (path if path.is_absolute() else (base / path).resolve())
        return self.model_copy(update={
            "items": resolve(self.items),
            "interactions": resolve(self.interactions),
            "manifest": resolve(self.manifest),
        })


DataSource = Annotated[Union[SyntheticSource, CsvSource], Field(discriminator="kind")]


class SimulatorSpec(_Strict):
    """Where the relevance simulator comes from: loaded when `path` exists, trained otherwise."""
    path: Optional[Path] = None
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, ge=1)


# ==================== Policies ====================

class PolicySpec(_Strict):
    """One entry of the policy grid; unset fields inherit from the experiment's hyper."""
    name: Optional[str] = None
    variant: PolicyVariant
    lambda_: Optional[float] = Field(None, ge=0, alias="lambda")
    alpha: Optional[float] = Field(None, ge=0)
    mmr_beta: float = Field(0.5, ge=0.0, le=1.0)
    detach_agent: Optional[bool] = None

    @property
    def display_name(self) -> str:
        if self.name:
            return self.name
        if self.lambda_ is None or self.variant not in (PolicyVariant.AGENT_BASED, PolicyVariant.NON_AGENT):
            return self.variant.value
        return f"{self.variant.value}_l{self.lambda_:g}"

    def to_policy(self, hyper: HyperParams) -> Policy:
        overrides = {
            field: value
            for field, value in (("lambda_", self.lambda_), ("alpha", self.alpha), ("detach_agent", self.detach_agent))
            if value is not None
        }
        return Policy(
            name=self.display_name,
            variant=self.variant,
            hyper=hyper.model_copy(update=overrides),
            mmr_beta=self.mmr_beta,
        )


def default_policy_grid() -> list[PolicySpec]:
    """accuracy_only (lambda = 0), mmr, non_retraining, and both fairness variants at lambda 2, 5, 10."""
    grid = [
        PolicySpec(variant=PolicyVariant.ACCURACY_ONLY),
        PolicySpec(variant=PolicyVariant.MMR),
        PolicySpec(variant=PolicyVariant.NON_RETRAINING),
    ]
    for variant in (PolicyVariant.AGENT_BASED, PolicyVariant.NON_AGENT):
        grid.extend(PolicySpec(variant=variant, lambda_=value) for value in (2.0, 5.0, 10.0))
    return grid


class ReportSpec(_Strict):
    # Rounds compared against round 0 in the category-shift table
    compare_rounds: list[int] = Field(default_factory=lambda: [5, 9])


# ==================== Experiment ====================

class ExperimentConfig(_Strict):
    """A complete, schema-validated experiment."""
    data: DataSource = Field(default_factory=SyntheticSource)
    hyper: HyperParams = Field(default_factory=HyperParams)
    simulator: SimulatorSpec = Field(default_factory=SimulatorSpec)
    policies: list[PolicySpec] = Field(default_factory=default_policy_grid, min_length=1)
    report: ReportSpec = Field(default_factory=ReportSpec)
    popularity_boundaries: list[float] = Field(default_factory=lambda: [5, 10, 15, 20])
    output_dir: Optional[Path] = None
    threads: int = Field(1, ge=1)

    @field_validator("popularity_boundaries")
    @classmethod
    def validate_boundaries(cls, v):
        if len(v) != 4 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"popularity_boundaries must be 4 strictly increasing thresholds, got {v}")
        return v

    @model_validator(mode="after")
    def validate_policy_names(self):
        names = [spec.display_name for spec in self.policies]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"policy names must be unique, duplicated: {', '.join(duplicates)}")
        return self

    def build_policies(self) -> list[Policy]:
        return [spec.to_policy(self.hyper) for spec in self.policies]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {seed}")
        return self.model_copy(update={"hyper": self.hyper.model_copy(update={"seed": seed})})


# ==================== Reports ====================

class PolicySummary(BaseModel):
    """Change of the headline metrics from the first to the last recorded round."""
    policy: str
    first_round: int
    last_round: int
    ndcg_first: float
    ndcg_last: float
    gini_first: float
    gini_last: float

    @property
    def delta_ndcg(self) -> float:
        return self.ndcg_last - self.ndcg_first

    @property
    def delta_gini(self) -> float:
        return self.gini_last - self.gini_first


class CategoryShift(BaseModel):
    policy: str
    round: int
    category_freq: tuple[float, float, float, float, float]


class Report(BaseModel):
    policies: list[PolicySummary] = Field(default_factory=list)
    shifts: list[CategoryShift] = Field(default_factory=list)
    malformed_rows: int = 0


class RunResult(BaseModel):
    """Files written by one `run`."""
    out_dir: Path
    metrics: Path
    baseline: Path
    manifest: Path
    summary: Path
    rows: int
