"""Differentiable delay-bound synthesis of flow paths and priorities.

Delay bounds of every routing/priority alternative are derived once as
expressions over relaxed selection variables, compiled to a flat tape, and
minimised with Frank-Wolfe over the product of per-flow simplices.
"""
from .netmodel import (Flow, InstanceError, ProblemInstance, RateLatency, Server, ServerGraph,
                       TokenBucket, validate)
from .objective import CompiledObjective, ObjectiveSpec, Utility
from .optim import OptimizerReport, frank_wolfe, frank_wolfe_momentum, run_method

__version__ = "0.1.0"

__all__ = [
    "Flow", "InstanceError", "ProblemInstance", "RateLatency", "Server", "ServerGraph", "TokenBucket",
    "validate", "CompiledObjective", "ObjectiveSpec", "Utility", "OptimizerReport", "frank_wolfe",
    "frank_wolfe_momentum", "run_method",
]
