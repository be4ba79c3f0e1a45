"""
Data models for the envshift pipeline
"""

from .arhmm import Arhmm, EmTrace, Posteriors
from .generation import AssumptionReport, Dataset, MarkovSpec, TrueSystem
from .idea import ElboBreakdown, ForecastResult, IdeaSpec, TraceRow
from .metrics import MetricsReport
from .run_config import (
    EvalSection,
    GenSection,
    HmmSection,
    PathsSection,
    RunConfig,
    TrainSection,
)

__all__ = [
    "Arhmm",
    "EmTrace",
    "Posteriors",
    "AssumptionReport",
    "Dataset",
    "MarkovSpec",
    "TrueSystem",
    "ElboBreakdown",
    "ForecastResult",
    "IdeaSpec",
    "TraceRow",
    "MetricsReport",
    "EvalSection",
    "GenSection",
    "HmmSection",
    "PathsSection",
    "RunConfig",
    "TrainSection",
]
