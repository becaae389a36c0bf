"""Minimal numpy deep-learning stack for RGB face anti-spoofing."""

from .models import (
    BlockSpec,
    HeadLayer,
    Model,
    ModelSpec,
    build_heavy_model,
    build_light_model,
    build_model,
    parameter_count,
    round_filters,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "HeadLayer",
    "Model",
    "ModelSpec",
    "Tape",
    "Tensor",
    "backward",
    "build_heavy_model",
    "build_light_model",
    "build_model",
    "parameter_count",
    "round_filters",
]
