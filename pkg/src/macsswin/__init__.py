"""Shifted-window transformer classifiers for microscope frames and clips.

Everything runs on numpy through a small reverse-mode autodiff core
(:mod:`macsswin.tensor`).
"""
from .exceptions import (
    ConfigError, ContractError, DTypeError, FormatError, ImageReadError, MacsSwinError, ManifestParseError,
    ParameterError, ShapeError, TrainingError, ValidationError,
)
from .models import MacsSwin, MacsSwinConfig, VidMacsSwin, VidMacsSwinConfig, freeze_stages, get_config, predict
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DTypeError", "FormatError", "ImageReadError", "MacsSwin",
    "MacsSwinConfig", "MacsSwinError", "ManifestParseError", "ParameterError", "ShapeError", "Tape", "Tensor",
    "TrainingError", "ValidationError", "VidMacsSwin", "VidMacsSwinConfig", "freeze_stages", "get_config",
    "grad_check", "predict",
]
