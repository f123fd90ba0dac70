from .nn import batchnorm3d, conv3d, flatten, kaiming_uniform, linear, maxpool3d, pooled_dims
from .optim import Adam, adam_step
from .params import ParameterSet
from .resize import trilinear_resize
from .tensor import (Tensor, backward, clip, exp, log, log_softmax, matmul, mean,
                     minimum, pick, relu, sigmoid, softmax, tsum)

__all__ = [
    "Tensor", "backward", "clip", "exp", "log", "log_softmax", "matmul", "mean",
    "minimum", "pick", "relu", "sigmoid", "softmax", "tsum",
    "conv3d", "batchnorm3d", "maxpool3d", "linear", "flatten", "kaiming_uniform",
    "pooled_dims", "trilinear_resize", "Adam", "adam_step", "ParameterSet",
]
