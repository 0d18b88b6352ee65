"""Pipeline-parallel encoder fine-tuning with multi-lane attention scheduling."""

from .attention import AttentionLayer, ExecutionPlan, Segment
from .lanes import LaneSet, ProfileTable, discover_lanes, profile
from .model import EncoderConfig, build_model
from .partition import StageSpec, partition
from .pipeline import Stage, build_schedule, check_trace
from .scheduler import AllocationPlan, allocate
from .tensor import Parameter, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan",
    "AttentionLayer",
    "EncoderConfig",
    "ExecutionPlan",
    "LaneSet",
    "Parameter",
    "ProfileTable",
    "Segment",
    "Stage",
    "StageSpec",
    "Tensor",
    "allocate",
    "backward",
    "build_model",
    "build_schedule",
    "check_trace",
    "discover_lanes",
    "partition",
    "profile",
]
