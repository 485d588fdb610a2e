"""Offline planner for pipeline-parallel training of models with large
frozen parts: stage partitioning, schedule simulation, and pipeline-bubble
filling with non-trainable layer computation."""

from .errors import (
    ExtrapolationError,
    InfeasibleError,
    NoFeasiblePlanError,
    OracleTooLargeError,
    ParseError,
    PipefillError,
    ValidationError,
)
from .profile import (
    ClusterConfig,
    CommCosts,
    ComponentProfile,
    LayerCost,
    ModelProfile,
    cost_at,
    load_profile,
    save_profile,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig",
    "CommCosts",
    "ComponentProfile",
    "ExtrapolationError",
    "InfeasibleError",
    "LayerCost",
    "ModelProfile",
    "NoFeasiblePlanError",
    "OracleTooLargeError",
    "ParseError",
    "PipefillError",
    "ValidationError",
    "cost_at",
    "load_profile",
    "save_profile",
    "__version__",
]
