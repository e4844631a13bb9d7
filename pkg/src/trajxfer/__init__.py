"""Region- and task-transferable trajectory encoder with its data and training tooling."""

from trajxfer.core import (
    POI,
    GeoPoint,
    InputPoint,
    MaskKind,
    ModalityMask,
    ModelConfig,
    RoadSegment,
    TaskInstance,
    Trajectory,
    TrajectoryPoint,
    temporal_features,
    validate_trajectory,
)
from trajxfer.geo import RegionContext, StubProvider, build_index, haversine
from trajxfer.model import RTTE, load_checkpoint, save_checkpoint
from trajxfer.tasks import TaskKind, make_instance, metrics
from trajxfer.train import ExperimentConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "POI", "GeoPoint", "InputPoint", "MaskKind", "ModalityMask", "ModelConfig", "RoadSegment",
    "TaskInstance", "Trajectory", "TrajectoryPoint", "temporal_features", "validate_trajectory",
    "RegionContext", "StubProvider", "build_index", "haversine", "RTTE", "load_checkpoint",
    "save_checkpoint", "TaskKind", "make_instance", "metrics", "ExperimentConfig", "evaluate",
    "finetune", "pretrain",
]
