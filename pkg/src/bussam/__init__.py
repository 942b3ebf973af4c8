"""Desk-scale SAM-style breast ultrasound segmentation on a numpy autodiff core."""
from bussam.autodiff import Tensor, backward, detect_anomaly, no_grad
from bussam.config import ModelConfig, TrainConfig, load_config
from bussam.model import BussamModel, build_model, forward, trainable_parameters

__all__ = [
    "BussamModel",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "detect_anomaly",
    "forward",
    "load_config",
    "no_grad",
    "trainable_parameters",
]

__version__ = "0.1.0"
