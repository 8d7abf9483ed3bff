"""Dense float64 tensors with reverse-mode differentiation and the layer set the model needs."""
from .autograd import GraphError, ShapeError, Tensor, grad, is_grad_enabled, no_grad, set_grad_enabled
from .conv import conv2d, conv2d_transpose, conv3d
from .nn import (
    BatchNorm, Conv2d, ConvTranspose2d, Dense, Dropout, Module, Parameter, SNConv2d, SNConv3d,
    batch_norm, operator_norm, power_iteration, spectral_normalize,
)
from .ops import activation, concat, global_average_pool, softmax, stack
from .optim import Adam, adam_step

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "ConvTranspose2d", "Dense", "Dropout", "GraphError", "Module",
    "Parameter", "SNConv2d", "SNConv3d", "ShapeError", "Tensor", "activation", "adam_step",
    "batch_norm", "concat", "conv2d", "conv2d_transpose", "conv3d", "global_average_pool", "grad",
    "is_grad_enabled", "no_grad", "operator_norm", "power_iteration", "set_grad_enabled", "softmax",
    "spectral_normalize", "stack",
]
