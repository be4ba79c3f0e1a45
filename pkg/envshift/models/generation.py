"""
Generation Models

The latent Markov-environment system, the datasets it produces and the
report on its identifiability assumptions.
"""

from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from envshift.services.substrate import Mlp

ROW_TOL = 1e-12


class MarkovSpec(BaseModel):
    """First-order Markov chain over E environments"""

    A: np.ndarray  # E×E row-stochastic
    pi: np.ndarray  # initial distribution

    class Config:
        arbitrary_types_allowed = True

    @field_validator("A", "pi", mode="before")
    @classmethod
    def _as_array(cls, v):
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def _check_stochastic(self):
        E = self.A.shape[0]
        if self.A.ndim != 2 or self.A.shape != (E, E) or E < 1:
            raise ValueError(f"A must be square, got shape {self.A.shape}")
        if self.pi.shape != (E,):
            raise ValueError(f"pi must have length {E}, got shape {self.pi.shape}")
        if (self.A < 0).any() or (self.pi < 0).any():
            raise ValueError("transition and initial probabilities must be >= 0")
        if np.abs(self.A.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ValueError("rows of A must sum to 1")
        if abs(self.pi.sum() - 1.0) > ROW_TOL:
            raise ValueError("pi must sum to 1")
        return self

    @property
    def n_envs(self) -> int:
        return self.A.shape[0]


class TrueSystem(BaseModel):
    """
    Ground-truth generator parameters.

    z^e_t = env_mean[e_t] + env_std[e_t] * eps
    z^s_t = f_s(z^s_{t-1}, ..., z^s_{t-L}) + noise_scale_s * eps
    x_t   = g(z^s_t, z^e_t)
    """

    markov: MarkovSpec
    n_s: int = Field(ge=1)
    n_e: int = Field(ge=1)
    lag: int = Field(ge=1)
    env_mean: np.ndarray  # E×n_e
    env_std: np.ndarray  # E×n_e
    f_s: Mlp  # n_s·L → n_s
    noise_scale_s: float = Field(ge=0.0)
    g: Mlp  # n → n

    class Config:
        arbitrary_types_allowed = True

    @field_validator("env_mean", "env_std", mode="before")
    @classmethod
    def _as_array(cls, v):
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def _check_shapes(self):
        shape = (self.markov.n_envs, self.n_e)
        if self.env_mean.shape != shape or self.env_std.shape != shape:
            raise ValueError(f"environment Gaussians must have shape {shape}")
        if (self.env_std < 0).any():
            raise ValueError("environment std must be >= 0")
        if self.f_s.in_dim != self.n_s * self.lag or self.f_s.out_dim != self.n_s:
            raise ValueError("f_s must map n_s*lag -> n_s")
        if self.g.in_dim != self.n or self.g.out_dim != self.n:
            raise ValueError("g must map n -> n")
        return self

    @property
    def n(self) -> int:
        return self.n_s + self.n_e

    def max_condition_number(self) -> float:
        """Largest condition number over the square weight matrices of g"""
        worst = 1.0
        for layer in self.g.layers:
            w = layer.weight.detach().numpy()
            if w.shape[0] == w.shape[1]:
                worst = max(worst, float(np.linalg.cond(w)))
        return worst

    def mean_separation(self) -> float:
        """min over e != e' of ||mu_e - mu_e'||"""
        E = self.markov.n_envs
        return min(
            float(np.linalg.norm(self.env_mean[a] - self.env_mean[b]))
            for a in range(E)
            for b in range(a + 1, E)
        )


class Dataset(BaseModel):
    """Observed series plus optional ground truth and windowing parameters"""

    x: np.ndarray  # T×n
    e_true: Optional[np.ndarray] = None  # T
    z_s_true: Optional[np.ndarray] = None  # T×n_s
    z_e_true: Optional[np.ndarray] = None  # T×n_e
    window: int = Field(default=24, ge=3)
    stride: int = Field(default=1, ge=1)
    t_split: int = Field(default=16, ge=1)

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_lengths(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"x must be T×n, got shape {self.x.shape}")
        T = self.x.shape[0]
        for name in ("e_true", "z_s_true", "z_e_true"):
            value = getattr(self, name)
            if value is not None and len(value) != T:
                raise ValueError(f"{name} has length {len(value)}, expected {T}")
        if not self.t_split < self.window:
            raise ValueError("t_split must be smaller than the window length")
        return self

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def n_obs(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> int:
        return self.window - self.t_split

    @property
    def has_ground_truth(self) -> bool:
        return self.e_true is not None and self.z_s_true is not None and self.z_e_true is not None


class AssumptionReport(BaseModel):
    """Numerical witnesses for the identifiability assumptions"""

    threshold: float = 1e-6
    full_rank_ok: bool
    min_singular_A: float
    reducible_warning: bool  # min off-diagonal of A is 0
    min_dwell: int
    dwell_ok: bool
    mean_separation: float
    separation_ok: bool
    v_independence_ok: bool
    v_min_singular: float
    w_independence_ok: bool
    w_min_singular: float

    def violations(self) -> list[str]:
        """Names of the failed assumption flags"""
        flags = {
            "full_rank": self.full_rank_ok,
            "sufficient_observation": self.dwell_ok,
            "mean_separation": self.separation_ok,
            "stationary_linear_independence": self.v_independence_ok,
            "nonstationary_linear_independence": self.w_independence_ok,
        }
        return [name for name, ok in flags.items() if not ok]

    @property
    def all_ok(self) -> bool:
        return not self.violations()
