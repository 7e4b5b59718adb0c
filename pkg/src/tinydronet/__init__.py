"""Compact drone-navigation CNN family: model IR, analyzers, memory planning, engine."""

from .family import FamilyConfig, build_dronet, family, remove_bypass, scale_channels
from .graph import LayerSpec, Model, TensorShape, infer_shapes
from .serialize import WeightSet, load_model, load_weights, save_model, save_weights

__version__ = "0.1.0"

__all__ = [
    "FamilyConfig", "LayerSpec", "Model", "TensorShape", "WeightSet",
    "build_dronet", "family", "infer_shapes", "load_model", "load_weights",
    "remove_bypass", "save_model", "save_weights", "scale_channels",
]
