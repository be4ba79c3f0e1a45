"""
Autoregressive HMM Models

Emission of state e: x_t | x_{t-1} ~ N(W_e x_{t-1} + b_e, diag exp(logvar_e)),
with x_0 treated as following an all-zero predecessor (N(b_e, ...)).
"""

import math
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

VAR_FLOOR = 1e-6
ROW_TOL = 1e-12


class Arhmm(BaseModel):
    """Estimated environment model"""

    A: np.ndarray  # E×E
    pi: np.ndarray  # E
    W: np.ndarray  # E×n×n
    b: np.ndarray  # E×n
    logvar: np.ndarray  # E×n
    var_floor: float = VAR_FLOOR

    class Config:
        arbitrary_types_allowed = True

    @field_validator("A", "pi", "W", "b", "logvar", mode="before")
    @classmethod
    def _as_array(cls, v):
        return np.asarray(v, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self):
        E, n = self.b.shape
        if self.A.shape != (E, E) or self.pi.shape != (E,):
            raise ValueError("A must be E×E and pi length E")
        if self.W.shape != (E, n, n) or self.logvar.shape != (E, n):
            raise ValueError("W must be E×n×n and logvar E×n")
        if np.abs(self.A.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ValueError("rows of A must sum to 1")
        if (self.logvar < math.log(self.var_floor) - 1e-12).any():
            raise ValueError("logvar below the variance floor")
        for name in ("A", "pi", "W", "b", "logvar"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} is not finite")
        return self

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_obs(self) -> int:
        return self.b.shape[1]

    def permuted(self, perm: np.ndarray) -> "Arhmm":
        """Model whose state k is this model's state perm[k]"""
        perm = np.asarray(perm)
        return Arhmm(
            A=self.A[np.ix_(perm, perm)],
            pi=self.pi[perm],
            W=self.W[perm],
            b=self.b[perm],
            logvar=self.logvar[perm],
            var_floor=self.var_floor,
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "E": self.n_states,
            "A": self.A.tolist(),
            "pi": self.pi.tolist(),
            "var_floor": self.var_floor,
            "states": [
                {"W": self.W[e].tolist(), "b": self.b[e].tolist(), "logvar": self.logvar[e].tolist()}
                for e in range(self.n_states)
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "Arhmm":
        states = data["states"]
        return cls(
            A=data["A"],
            pi=data["pi"],
            W=[s["W"] for s in states],
            b=[s["b"] for s in states],
            logvar=[s["logvar"] for s in states],
            var_floor=data.get("var_floor", VAR_FLOOR),
        )


class Posteriors(BaseModel):
    """Forward-backward marginals of one sequence"""

    gamma: np.ndarray  # T×E
    xi: np.ndarray  # (T-1)×E×E
    loglik: float

    class Config:
        arbitrary_types_allowed = True


class EmTrace(BaseModel):
    """Log-likelihood per EM iteration for every restart"""

    logliks: list[list[float]] = Field(default_factory=list)
    floor_active: list[bool] = Field(default_factory=list)
    converged: list[bool] = Field(default_factory=list)
    best_restart: int = 0

    def rows(self) -> list[dict[str, Any]]:
        """Flat rows for hmm_trace.csv"""
        return [
            {"restart": r, "iteration": i, "loglik": ll, "floor_active": int(self.floor_active[r])}
            for r, trace in enumerate(self.logliks)
            for i, ll in enumerate(trace)
        ]

    def is_monotone(self, tol: float = 1e-9) -> bool:
        return all(
            b >= a - tol for trace in self.logliks for a, b in zip(trace, trace[1:])
        )
