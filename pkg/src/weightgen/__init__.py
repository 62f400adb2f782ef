"""Desk-scale laboratory for generating distilled student network weights
directly from teacher ensembles with a Transformer weight generator."""

__version__ = "0.1.0"

from .arch import ArchSpec, Batch, LayerSpec, WeightSet, build_arch, functional_forward, param_count
from .codec import NormStats, TokenMatrix, detokenize_layer, tokenize_layer
from .errors import (
    CapacityError,
    ConfigurationError,
    ProtocolError,
    StructuralError,
    WeightGenError,
)
from .generator import CrossState, GeneratorConfig, WeightGenerator
from .losses import LossConfig, ce_loss, combined_loss, kd_loss, l2_match_loss, shift_consistency

__all__ = [
    "ArchSpec",
    "Batch",
    "LayerSpec",
    "WeightSet",
    "build_arch",
    "functional_forward",
    "param_count",
    "NormStats",
    "TokenMatrix",
    "tokenize_layer",
    "detokenize_layer",
    "CrossState",
    "GeneratorConfig",
    "WeightGenerator",
    "LossConfig",
    "ce_loss",
    "combined_loss",
    "kd_loss",
    "l2_match_loss",
    "shift_consistency",
    "WeightGenError",
    "ConfigurationError",
    "StructuralError",
    "CapacityError",
    "ProtocolError",
]
