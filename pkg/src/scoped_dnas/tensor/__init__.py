from .errors import ConfigurationError, DegenerateVarianceError, ShapeError
from .functional import (
    ACTIVATIONS,
    LEAKY_RELU_SLOPE,
    activation,
    avg_pool2d,
    batch_norm,
    conv2d,
    global_avg_pool,
    leaky_relu,
    linear,
    max_pool2d,
    mish,
    pool,
    relu,
    softmax_cross_entropy,
)
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .optim import Adam, OptimState, SGDNesterov, adam_step, sgd_nesterov_step
from .tensor import Tensor, default_dtype, get_default_dtype, no_grad, set_default_dtype, tensor

__all__ = [
    "ACTIVATIONS",
    "LEAKY_RELU_SLOPE",
    "Adam",
    "ConfigurationError",
    "DegenerateVarianceError",
    "OptimState",
    "SGDNesterov",
    "ShapeError",
    "Tensor",
    "activation",
    "adam_step",
    "avg_pool2d",
    "batch_norm",
    "conv2d",
    "default_dtype",
    "get_default_dtype",
    "global_avg_pool",
    "gradcheck",
    "leaky_relu",
    "linear",
    "max_pool2d",
    "mish",
    "no_grad",
    "numerical_gradient",
    "pool",
    "relative_error",
    "relu",
    "set_default_dtype",
    "sgd_nesterov_step",
    "softmax_cross_entropy",
    "tensor",
]
