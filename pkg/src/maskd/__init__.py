"""Masked-feature knowledge distillation on a small reverse-mode autodiff engine."""

from . import autodiff, core, io, kernels, nets, pipeline
from .autodiff import Tensor, grad_check
from .core import MaskSet, Projector, ReceptiveTokens, WeightingNet
from .pipeline import DistillConfig, ToyConfig

__version__ = "0.1.0"

__all__ = [
    "autodiff", "core", "io", "kernels", "nets", "pipeline",
    "Tensor", "grad_check", "MaskSet", "Projector", "ReceptiveTokens", "WeightingNet",
    "DistillConfig", "ToyConfig",
]
