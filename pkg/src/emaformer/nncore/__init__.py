"""Minimal reverse-mode autodiff substrate for the articulatory models."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import EmptyMaskWarning, ShapeError
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .module import Conv1d, Embedding, LayerNorm, Linear, Module, ModuleList, Parameter
from .tensor import (
    NonFiniteError,
    Tensor,
    float64_mode,
    get_dtype,
    is_float64,
    no_grad,
    scope,
)

__all__ = [
    "CheckpointError", "Conv1d", "Embedding", "EmptyMaskWarning", "GradCheckReport",
    "LayerNorm", "Linear", "Module", "ModuleList", "NonFiniteError", "Parameter",
    "ShapeError", "Tensor", "float64_mode", "functional", "get_dtype", "grad_check",
    "grad_check_params", "is_float64", "load_checkpoint", "no_grad", "save_checkpoint",
    "scope",
]
