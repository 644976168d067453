"""Minimal NCHW tensor engine with reverse-mode gradients."""
from .tensor import Graph, Tensor, backward, grad_enabled, no_grad
from .ops import (
    BatchNormState,
    ConvSpec,
    add,
    batch_norm,
    concat,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv,
    relu,
    scale,
    separable_weight_count,
    total,
)
from .gradcheck import grad_check
from .reference import conv2d_reference

__all__ = [
    "BatchNormState", "ConvSpec", "Graph", "Tensor", "add", "backward", "batch_norm",
    "concat", "conv2d", "conv2d_reference", "depthwise_conv2d", "depthwise_separable_conv",
    "grad_check", "grad_enabled", "no_grad", "relu", "scale", "separable_weight_count", "total",
]
