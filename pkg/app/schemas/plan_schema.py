from builtins import bool, int, str
from typing import List
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.config_schemas import RankEstimatorConfig


class LayerRank(BaseModel):
    layer: str = Field(..., description="Layer id")
    rank: int = Field(..., ge=1, description="Factorization rank")
    skip: bool = Field(default=False, description="True when factorizing would not reduce the parameter count")

    model_config = ConfigDict(extra="forbid")


class FactorizationPlan(BaseModel):
    switch_epoch: int = Field(..., ge=0, description="Number of full-rank epochs before factorization")
    K: int = Field(..., ge=0, description="Length of the unfactorized layer prefix")
    estimator: RankEstimatorConfig = Field(default_factory=RankEstimatorConfig)
    ranks: List[LayerRank] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")

    @property
    def factorized_layers(self) -> List[str]:
        return [entry.layer for entry in self.ranks if not entry.skip]

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)
