from builtins import float, int, str
from typing import Dict, List, Literal, Optional
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.plan_schema import FactorizationPlan


class StackTiming(BaseModel):
    id: str
    l_beg: int = Field(..., ge=1)
    l_end: int = Field(..., ge=1)
    avg_full_ms: float
    avg_low_ms: float
    speedup: float

    model_config = ConfigDict(extra="forbid")


class ProfileReport(BaseModel):
    stacks: List[StackTiming] = Field(default_factory=list)
    K_hat: int = Field(..., ge=0)
    upsilon: float
    rho_bar: float
    tau: int

    model_config = ConfigDict(extra="forbid")

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    phase: Literal["full_rank", "low_rank"]
    loss: float
    accuracy: float = Field(..., ge=0.0, le=1.0)
    learning_rate: float

    model_config = ConfigDict(extra="forbid")


class LayerSummary(BaseModel):
    layer: str
    kind: str
    shape: List[int]
    rank: Optional[int] = Field(default=None, description="Factorization rank, None for full-rank layers")
    rank_ratio: Optional[float] = None
    params_before: int
    params_after: int

    model_config = ConfigDict(extra="forbid")


class TrainReport(BaseModel):
    seed: int
    total_epochs: int
    K: int = Field(..., ge=0, description="Length of the full-rank layer prefix")
    switch_epoch: Optional[int] = Field(default=None, description="Epoch at which training went low-rank")
    switch_source: Optional[Literal["detected", "forced", "fallback"]] = None
    plan: Optional[FactorizationPlan] = None
    epochs: List[EpochRecord] = Field(default_factory=list)
    layers: List[LayerSummary] = Field(default_factory=list)
    params_before: int = 0
    params_after: int = 0
    final_accuracy: Optional[float] = None
    wall_time: Dict[str, float] = Field(default_factory=dict, description="Seconds per phase, never part of report.json")

    model_config = ConfigDict(extra="forbid")

    @property
    def switched(self) -> bool:
        return any(record.phase == "low_rank" for record in self.epochs)

    @property
    def factorized_params(self) -> Dict[str, int]:
        """Parameter totals of the layers the plan replaced, before and after."""
        replaced = [layer for layer in self.layers if layer.rank is not None]
        return {
            "before": sum(layer.params_before for layer in replaced),
            "after": sum(layer.params_after for layer in replaced),
        }

    def to_json(self) -> str:
        """Deterministic report; wall times go to timings.json instead."""
        return self.model_dump_json(indent=2, exclude={"wall_time"})

    def timings_json(self) -> str:
        return self.model_dump_json(indent=2, include={"wall_time"})
