"""Batched differentiable box-constrained iLQR MPC with staged dispatch."""

from .dynamics import DynModel, jacobians, step
from .errors import ConfigError, DivergenceError, NumericError
from .gradlayer import BackwardSeed, GradOutput
from .ilqr import Gains, SolveResult, SolveSettings
from .qcost import StageCostParams, Trajectory, stage_cost, total_cost

__version__ = "0.1.0"

__all__ = [
    "BackwardSeed",
    "ConfigError",
    "DivergenceError",
    "DynModel",
    "Gains",
    "GradOutput",
    "NumericError",
    "SolveResult",
    "SolveSettings",
    "StageCostParams",
    "Trajectory",
    "jacobians",
    "stage_cost",
    "step",
    "total_cost",
    "__version__",
]
