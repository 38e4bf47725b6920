"""Detect LiDAR-camera miscalibration with a two-stream contrastive network."""

from .faults import BUILTIN_CONFIGS, ErrorRangeConfig, Perturbation, get_config
from .geometry import CalibrationSet, DepthMap, ExtrinsicTransform, PointCloud, project, rasterize
from .model import MiscalibrationDetector, load_checkpoint

__all__ = ["BUILTIN_CONFIGS", "CalibrationSet", "DepthMap", "ErrorRangeConfig", "ExtrinsicTransform",
           "MiscalibrationDetector", "Perturbation", "PointCloud", "get_config", "load_checkpoint",
           "project", "rasterize"]
__version__ = "0.1.0"
