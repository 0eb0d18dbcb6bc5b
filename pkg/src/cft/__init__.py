"""Calibration-free multi-camera BEV transformer at desk scale."""

from .config import RunConfig, TrainConfig
from .model import CFTModel, cft_forward
from .pa import PaDesign
from .va import SchemeKind

__version__ = "0.1.0"

__all__ = ["RunConfig", "TrainConfig", "CFTModel", "cft_forward", "PaDesign", "SchemeKind"]
