"""
Evaluation Models
"""

from typing import Optional

from pydantic import BaseModel, Field


class MetricsReport(BaseModel):
    """Contents of metrics.json; groups whose inputs are missing stay null"""

    correlation_method: str = "pearson"
    mcc_s: Optional[float] = None
    mcc_e: Optional[float] = None
    mcc_all: Optional[float] = None
    assignment: Optional[list[int]] = None  # true dim i ↔ estimated dim assignment[i]
    correlation: Optional[list[list[float]]] = None  # |ρ| true × estimated
    diagnostic_cca_mcc_all: Optional[float] = Field(
        default=None, description="MCC after a least-squares linear alignment; diagnostic only"
    )

    env_accuracy: Optional[float] = None
    best_perm: Optional[list[int]] = None  # estimated label k ↔ true label best_perm[k]
    a_mse: Optional[float] = None

    forecast_mse: Optional[float] = None
    forecast_mae: Optional[float] = None

    final_elbo: Optional[float] = None
    missing: list[str] = Field(default_factory=list)

    def has_any_metric(self) -> bool:
        return any(
            v is not None
            for v in (self.mcc_all, self.env_accuracy, self.forecast_mse, self.final_elbo)
        )
