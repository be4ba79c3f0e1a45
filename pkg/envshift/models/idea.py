"""
Variational Model Records

Architecture/config echo of the variational model, ELBO breakdowns and
training traces.
"""

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field


class IdeaSpec(BaseModel):
    """Dimensions, architecture and ELBO weights of one variational model"""

    n_obs: int = Field(ge=1)
    n_s: int = Field(ge=1)
    n_e: int = Field(ge=1)
    n_envs: int = Field(ge=1)
    t_split: int = Field(ge=1)
    window: int = Field(ge=2)
    hidden: int = Field(default=384, ge=1)
    prior_hidden: int = Field(default=128, ge=1)
    prior_lag: int = Field(default=1, ge=1)
    slope: float = Field(default=0.2, gt=0.0, lt=1.0)
    prior_mode: Literal["affine", "network"] = "affine"
    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=0.02, ge=0.0)
    gamma: float = Field(default=0.02, ge=0.0)
    obs_logvar: float = math.log(0.01)
    seed: int = 0

    class Config:
        extra = "forbid"

    @property
    def horizon(self) -> int:
        return self.window - self.t_split


class ElboBreakdown(BaseModel):
    """ELBO parts; total = pre + alpha·rec − beta·kld_s − gamma·kld_e"""

    rec: float
    pre: float
    kld_s: float
    kld_e: float
    total: float

    @classmethod
    def from_parts(
        cls, rec: float, pre: float, kld_s: float, kld_e: float, alpha: float, beta: float, gamma: float
    ) -> "ElboBreakdown":
        return cls(
            rec=rec,
            pre=pre,
            kld_s=kld_s,
            kld_e=kld_e,
            total=pre + alpha * rec - beta * kld_s - gamma * kld_e,
        )


class TraceRow(BaseModel):
    """Per-epoch means written to trace.csv"""

    epoch: int
    rec: float
    pre: float
    kld_s: float
    kld_e: float
    total: float
    recon_mse: float


class ForecastResult(BaseModel):
    """Forecast of one lookback window with its environment continuation"""

    x_hat: np.ndarray  # horizon × n (original scale)
    e_hat: np.ndarray  # horizon

    class Config:
        arbitrary_types_allowed = True
