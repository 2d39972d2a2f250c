"""Numpy tensor library with reverse-mode autodiff and the layers FGI-Net needs."""
from . import functional
from .gradcheck import finite_diff_grad, max_relative_error
from .nn import (BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Module, ModuleList,
                 Parameter, Sequential)
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "functional", "finite_diff_grad", "max_relative_error", "BatchNorm2d", "Conv2d",
    "Dropout", "LayerNorm", "Linear", "Module", "ModuleList", "Parameter", "Sequential",
    "DEFAULT_DTYPE", "Tensor", "as_tensor", "is_grad_enabled", "no_grad",
]
