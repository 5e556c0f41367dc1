"""Oriented object detection with a set-prediction transformer, in numpy."""
from .config import ExperimentConfig, preset
from .geometry import RotatedBox, rotated_iou
from .matching import GroundTruthSet, hungarian_match, set_loss
from .model import Detector

__all__ = ["Detector", "ExperimentConfig", "GroundTruthSet", "RotatedBox", "hungarian_match", "preset",
           "rotated_iou", "set_loss"]
__version__ = "0.1.0"
