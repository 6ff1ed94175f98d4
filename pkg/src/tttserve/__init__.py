"""Deterministic serving runtime and simulator for request-owned, mutable TTT state."""

from tttserve.backends import BackendType, ShapeClass
from tttserve.costmodel import CostModel
from tttserve.engine import Engine, RunReport, StreamSpec, run_replicas
from tttserve.planner import Effect, Mode, PlannerConfig
from tttserve.state_core import StateTable

__all__ = [
    "BackendType",
    "CostModel",
    "Effect",
    "Engine",
    "Mode",
    "PlannerConfig",
    "RunReport",
    "ShapeClass",
    "StateTable",
    "StreamSpec",
    "run_replicas",
]

__version__ = "0.1.0"
