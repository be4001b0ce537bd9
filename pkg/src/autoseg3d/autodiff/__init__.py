from .ops import (ShapeError, concat, conv3d, conv_output_extent, conv_transpose3d,
                  instance_norm, leaky_relu, softmax_channels, take)
from .optim import LrSchedule, adam_step
from .tensor import GraphError, Parameter, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "GraphError", "LrSchedule", "Parameter", "ShapeError", "Tensor", "adam_step", "as_tensor",
    "concat", "conv3d", "conv_output_extent", "conv_transpose3d", "instance_norm",
    "is_grad_enabled", "leaky_relu", "no_grad", "softmax_channels", "take",
]
