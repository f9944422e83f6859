from builtins import ValueError, bool, float, int, len, str
from enum import Enum
from typing import List, Literal, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class EstimatorMode(str, Enum):
    STABLE = "stable"
    SCALED_STABLE = "scaled_stable"
    MAX_RULE = "max_rule"


class RankEstimatorConfig(BaseModel):
    mode: EstimatorMode = Field(default=EstimatorMode.SCALED_STABLE, description="Rank estimator used at the switch epoch")
    p: float = Field(default=0.8, ge=0.0, le=1.0, description="Accumulative-rank fraction used by max_rule")

    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class StabilizationConfig(BaseModel):
    epsilon: float = Field(default=0.1, gt=0.0, description="Stable-rank change per epoch below which a layer counts as stable")
    window: int = Field(default=3, ge=1, description="Number of one-step differences averaged by the derivative")
    min_epochs: int = Field(default=5, ge=1, description="Observations required before stabilization can be declared")

    model_config = ConfigDict(extra="forbid")


class LowRankDecayMode(str, Enum):
    FROBENIUS = "frobenius"
    L2 = "l2"
    NONE = "none"


class FullRankDecayMode(str, Enum):
    L2 = "l2"
    NONE = "none"


class DecayConfig(BaseModel):
    lambda_: float = Field(default=1e-4, ge=0.0, alias="lambda", description="Decay coefficient")
    low_rank_mode: LowRankDecayMode = Field(default=LowRankDecayMode.FROBENIUS)
    full_rank_mode: FullRankDecayMode = Field(default=FullRankDecayMode.L2)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ProfilerSettings(BaseModel):
    tau: int = Field(default=11, ge=2, description="Profiling iterations per variant, the first one is discarded")
    rho_bar: float = Field(default=0.25, gt=0.0, le=1.0, description="Rank ratio used when profiling a factorized stack")
    upsilon: float = Field(default=1.5, gt=1.0, description="Required full/low-rank speedup for a stack to be factorized")
    clock: Optional[Literal["wall", "roofline"]] = Field(default=None, description="Profiling clock, defaults to settings.profile_clock")

    model_config = ConfigDict(extra="forbid")


class LayerSpec(BaseModel):
    kind: Literal["dense", "conv", "flatten"]
    name: Optional[str] = Field(default=None, description="Layer id; defaults to layer<index>")
    out_features: Optional[int] = Field(default=None, ge=1)
    out_channels: Optional[int] = Field(default=None, ge=1)
    kernel_size: int = Field(default=3, ge=1)
    padding: Optional[int] = Field(default=None, ge=0, description="Zero padding, defaults to kernel_size // 2")
    activation: Literal["relu", "none"] = "relu"

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def check_width(self):
        if self.kind == "dense" and self.out_features is None:
            raise ValueError("dense layers need out_features")
        if self.kind == "conv" and self.out_channels is None:
            raise ValueError("conv layers need out_channels")
        return self

    @property
    def width(self) -> Optional[int]:
        return self.out_features if self.kind == "dense" else self.out_channels


class ModelSpec(BaseModel):
    input_shape: List[int] = Field(default_factory=lambda: [64], description="Per-sample input shape, (features,) or (C, H, W)")
    num_classes: int = Field(default=10, ge=2)
    layers: List[LayerSpec] = Field(default_factory=lambda: [
        LayerSpec(kind="dense", out_features=256),
        LayerSpec(kind="dense", out_features=256),
        LayerSpec(kind="dense", out_features=10, activation="none"),
    ])

    model_config = ConfigDict(extra="forbid")

    @field_validator("input_shape")
    def validate_input_shape(cls, value):
        if len(value) not in (1, 3) or any(v < 1 for v in value):
            raise ValueError("input_shape must be (features,) or (channels, height, width) with positive entries")
        return value

    @model_validator(mode="after")
    def check_output_layer(self):
        weight_layers = [layer for layer in self.layers if layer.kind != "flatten"]
        if len(weight_layers) < 2:
            raise ValueError("A model needs at least two weight layers")
        last = weight_layers[-1]
        if last.kind != "dense" or last.out_features != self.num_classes:
            raise ValueError("The last weight layer must be dense with num_classes outputs")
        # The output layer feeds the softmax directly.
        last.activation = "none"
        return self


class TrainConfig(BaseModel):
    total_epochs: int = Field(default=60, ge=1)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    decay: DecayConfig = Field(default_factory=DecayConfig)
    lr_milestones: List[Tuple[int, float]] = Field(default_factory=list, description="(epoch, multiplier) pairs")
    switch_lr_multiplier: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    stabilization: StabilizationConfig = Field(default_factory=StabilizationConfig)
    estimator: RankEstimatorConfig = Field(default_factory=RankEstimatorConfig)
    forced_E: Optional[int] = Field(default=None, ge=0, description="Switch epoch override, 0 means spectral initialization "
                                    "(needs the stable or max_rule estimator, scaled_stable keeps full rank at epoch 0)")
    forced_K: Optional[int] = Field(default=None, ge=1, description="Prefix length override, skips profiling")
    warmup_epochs: int = Field(default=0, ge=0)
    warmup_start_lr: Optional[float] = Field(default=None, gt=0.0)
    profiler: ProfilerSettings = Field(default_factory=ProfilerSettings)
    model: ModelSpec = Field(default_factory=ModelSpec)

    model_config = ConfigDict(extra="forbid")

    @field_validator("lr_milestones")
    def validate_milestones(cls, value):
        for epoch, multiplier in value:
            if epoch < 0 or multiplier <= 0:
                raise ValueError("Milestones need a non-negative epoch and a positive multiplier")
        return sorted(value)

    @model_validator(mode="after")
    def check_forced_epoch(self):
        if self.forced_E is not None and self.forced_E >= self.total_epochs:
            raise ValueError("forced_E must be smaller than total_epochs")
        return self
