"""Reverse-mode automatic differentiation over numpy arrays."""

from .tensor import (Node, Tensor, get_default_dtype, grad, is_grad_enabled, no_grad,
                     precision, set_default_dtype)
from . import functional
from .gradcheck import GradcheckResult, gradcheck
from .nn import (Conv1d, ConvTranspose1d, LayerNorm, Linear, Module, ModuleList, Parameter)
from .optim import AdamW, CosineAnnealingLR

__all__ = [
    "Node", "Tensor", "get_default_dtype", "set_default_dtype", "precision", "no_grad",
    "is_grad_enabled", "grad", "functional", "gradcheck", "GradcheckResult",
    "Module", "ModuleList", "Parameter", "Linear", "LayerNorm", "Conv1d", "ConvTranspose1d",
    "AdamW", "CosineAnnealingLR",
]
