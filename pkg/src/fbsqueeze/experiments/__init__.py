"""Figure-data drivers, run specs and file formats."""

from .runs import (
    RunResult,
    compare_outputs,
    moments_series,
    relaxation,
    rerun,
    steady_point,
    sweep,
    trajectories,
)
from .specs import ENGINES, MomentsSpec, RelaxationSpec, SteadySpec, SweepSpec, TrajectorySpec

__all__ = [
    "ENGINES",
    "MomentsSpec",
    "RelaxationSpec",
    "RunResult",
    "SteadySpec",
    "SweepSpec",
    "TrajectorySpec",
    "compare_outputs",
    "moments_series",
    "relaxation",
    "rerun",
    "steady_point",
    "sweep",
    "trajectories",
]
