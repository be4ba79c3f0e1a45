"""
Run Configuration Models

Every hyperparameter of the gen → fit-hmm → train → eval pipeline.
Unknown keys are rejected in every section.
"""

import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class GenSection(BaseModel):
    """Synthetic data generation"""

    n_s: int = Field(default=4, ge=1)
    n_e: int = Field(default=4, ge=1)
    n_envs: int = Field(default=3, ge=2)
    lag: int = Field(default=1, ge=1)
    t_train: int = Field(default=40_000, ge=2)
    t_test: int = Field(default=10_000, ge=2)
    window: int = Field(default=24, ge=3)
    stride: int = Field(default=2, ge=1)
    t_split: int = Field(default=16, ge=2)

    noise_scale_s: float = Field(default=0.3, ge=0.0)
    slope: float = Field(default=0.2, gt=0.0, lt=1.0)
    stationary_hidden: int = Field(default=32, ge=1)
    env_mean_range: float = Field(default=2.0, gt=0.0)
    env_std_min: float = Field(default=0.2, ge=0.0)
    env_std_max: float = Field(default=0.6, ge=0.0)
    separation_factor: float = Field(default=2.0, ge=0.0)
    self_blend: float = Field(default=0.7, ge=0.5, le=1.0)
    validate_assumptions: bool = True

    class Config:
        extra = "forbid"

    @property
    def horizon(self) -> int:
        return self.window - self.t_split

    @model_validator(mode="after")
    def _check_lengths(self):
        if not (self.lag < self.t_split < self.window):
            raise ValueError(
                f"t_split must lie in (lag, window): lag={self.lag}, "
                f"t_split={self.t_split}, window={self.window}"
            )
        floor = self.lag + self.horizon
        if self.t_train <= floor or self.t_test <= floor:
            raise ValueError(f"t_train and t_test must exceed lag + horizon = {floor}")
        if self.env_std_min > self.env_std_max:
            raise ValueError("env_std_min must not exceed env_std_max")
        return self


class HmmSection(BaseModel):
    """Autoregressive HMM fitting (phase 1)"""

    n_states: Optional[int] = Field(default=None, ge=1)
    restarts: int = Field(default=5, ge=1)
    max_iters: int = Field(default=200, ge=1)
    screen: int = Field(default=8, ge=1)
    screen_iters: int = Field(default=15, ge=1)
    tol: float = Field(default=1e-6, gt=0.0)
    segment_length: int = Field(default=200, ge=2)
    var_floor: float = Field(default=1e-6, gt=0.0)

    class Config:
        extra = "forbid"


class TrainSection(BaseModel):
    """Variational model training (phase 2)"""

    alpha: float = Field(default=1.0, gt=0.0)
    beta: float = Field(default=0.02, gt=0.0)
    gamma: float = Field(default=0.02, gt=0.0)
    lr: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    epochs: int = Field(default=50, ge=1)
    batch: int = Field(default=64, ge=1)

    hidden: int = Field(default=384, ge=1)
    prior_hidden: int = Field(default=128, ge=1)
    prior_lag: int = Field(default=1, ge=1)
    slope: float = Field(default=0.2, gt=0.0, lt=1.0)
    obs_logvar: float = math.log(0.01)

    prior_mode: Literal["affine", "network"] = "affine"
    env_mode: Literal["viterbi", "posterior", "random"] = "viterbi"
    variant: Literal[
        "full", "random_env", "no_stationary_prior", "no_nonstationary_prior"
    ] = "full"
    env_forecast_mode: Literal["argmax", "sample"] = "argmax"

    class Config:
        extra = "forbid"


class EvalSection(BaseModel):
    """Metric options"""

    correlation: Literal["pearson", "spearman"] = "pearson"
    cca_diagnostic: bool = True

    class Config:
        extra = "forbid"


class PathsSection(BaseModel):
    data_dir: str = "data"
    run_dir: str = "runs/default"

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    """Complete pipeline configuration (echoed into every output directory)"""

    seed: int = Field(default=0, ge=0)
    gen: GenSection = Field(default_factory=GenSection)
    hmm: HmmSection = Field(default_factory=HmmSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    paths: PathsSection = Field(default_factory=PathsSection)

    class Config:
        extra = "forbid"

    @property
    def n_states(self) -> int:
        """States assumed by the HMM (defaults to the generator's count)"""
        return self.hmm.n_states or self.gen.n_envs
