"""Zero-shot 3D anomaly detection on synthetic point clouds."""

from .config import ExperimentConfig
from .errors import (ConfigurationError, DefectRejected, NumericFailure, ProtocolViolation, ScoringError,
                     UndefinedMetricError, ZsadError)
from .geometry import CATEGORIES, DEFECT_KINDS, DefectSpec, PointCloud, generate_shape, inject_defect
from .metrics import auroc, average_precision, pro
from .model import Detector

__all__ = [
    "ExperimentConfig", "Detector", "PointCloud", "DefectSpec", "generate_shape", "inject_defect",
    "auroc", "average_precision", "pro", "CATEGORIES", "DEFECT_KINDS", "ZsadError", "ConfigurationError",
    "ProtocolViolation", "NumericFailure", "ScoringError", "UndefinedMetricError", "DefectRejected",
]
