"""Data models for drivesynth"""

from .camera_models import CameraView, Intrinsics, Pose, Trajectory
from .config_models import (
    CoTrainConfig,
    EvalConfig,
    LearningRates,
    ReconConfig,
    RefinerConfig,
    RunConfig,
    TileConfig,
)
from .metric_models import FrameMetric, MeanMetric, MetricReport
from .scene_models import SCENE_PRESETS, GroundTruthFrame, Primitive, SceneSpec
from .training_models import CurvePoint, LossBreakdown, PseudoLabel, PseudoLabelProvenance, RoundReport

__all__ = [
    "CameraView",
    "Intrinsics",
    "Pose",
    "Trajectory",
    "CoTrainConfig",
    "EvalConfig",
    "LearningRates",
    "ReconConfig",
    "RefinerConfig",
    "RunConfig",
    "TileConfig",
    "FrameMetric",
    "MeanMetric",
    "MetricReport",
    "SCENE_PRESETS",
    "GroundTruthFrame",
    "Primitive",
    "SceneSpec",
    "CurvePoint",
    "LossBreakdown",
    "PseudoLabel",
    "PseudoLabelProvenance",
    "RoundReport",
]
