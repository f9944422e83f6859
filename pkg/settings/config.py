from builtins import bool, float, int, str
from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Reproducibility
    cf_seed: Optional[int] = Field(default=None, description="Overrides the seed of the experiment config (env CF_SEED)")

    # Trainer runtime
    spectra_workers: int = Field(default=1, ge=1, description="Thread pool size for per-layer spectra at epoch boundaries")
    divergence_threshold: float = Field(default=1e6, gt=0, description="Training aborts once the loss exceeds this value")

    # Profiling
    profile_clock: str = Field(default="wall", description="Default profiling clock: wall or roofline")
    roofline_peak_macs: float = Field(default=1.0e12, gt=0, description="Peak multiply-accumulates per second of the roofline clock")
    roofline_machine_balance: float = Field(default=512.0, ge=0, description="MACs per moved element at which a layer turns compute bound")

    # Logging
    logging_config: str = Field(default="logging.conf", description="Path of the logging configuration file")
    debug: bool = Field(default=False, description="Debug mode forces DEBUG level on the root logger")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")


# Instantiate settings to be imported in your application
settings = Settings()
