"""Ensemble fusion and evaluation toolkit for multi-model PCB defect detection."""

__version__ = "0.1.0"

from .data_model import (
    CLASS_ORDER,
    DatasetIndex,
    DefectClass,
    Detection,
    DetectionSet,
    GroundTruthObject,
    ImageRecord,
    load_dataset,
    load_detections,
    save_dataset,
    save_detections,
)
from .errors import ConfigError, EvaluationError, FuselabError, ParseError, SchemaError, ValidationError
from .geometry import BoundingBox, area, iou, nms
from .fusion import EnsembleConfig, FusedDetection, fuse
from .evaluator import EvalConfig, EvalReport, evaluate
from .simulator import SimModelProfile, simulate, synthetic_dataset
from .tuner import TuneSpec, tune_weights

__all__ = [
    "CLASS_ORDER", "DatasetIndex", "DefectClass", "Detection", "DetectionSet", "GroundTruthObject",
    "ImageRecord", "load_dataset", "load_detections", "save_dataset", "save_detections",
    "ConfigError", "EvaluationError", "FuselabError", "ParseError", "SchemaError", "ValidationError",
    "BoundingBox", "area", "iou", "nms", "EnsembleConfig", "FusedDetection", "fuse",
    "EvalConfig", "EvalReport", "evaluate", "SimModelProfile", "simulate", "synthetic_dataset",
    "TuneSpec", "tune_weights",
]
