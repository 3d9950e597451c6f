"""Skill classification and grip-force regression from forearm ultrasound frames.

A from-scratch numpy CNN (five conv stages, a 16-unit dense layer, skill or
force head), the cross-validation harness, Grad-CAM interpretability and a
paced streaming replay.
"""
from .model import ArchitectureConfig, ModelParameters, build_model, count_parameters, forward
from .training import TrainConfig, run_cross_validation, train

__all__ = [
    "ArchitectureConfig", "ModelParameters", "TrainConfig", "build_model", "count_parameters",
    "forward", "run_cross_validation", "train",
]
__version__ = "0.1.0"
