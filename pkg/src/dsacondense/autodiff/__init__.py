from .tensor import (
    DetachedLeafWarning,
    Function,
    SecondOrderError,
    ShapeError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    enable_grad,
    flip,
    grad,
    is_grad_enabled,
    leaky_relu,
    logsumexp,
    maximum,
    no_grad,
    pad,
)
from .graph import Graph, forward, gradient, gradient_of_gradient_objective
from . import functional

__all__ = [
    "DetachedLeafWarning",
    "Function",
    "Graph",
    "SecondOrderError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "broadcast_to",
    "concat",
    "enable_grad",
    "flip",
    "forward",
    "functional",
    "grad",
    "gradient",
    "gradient_of_gradient_objective",
    "is_grad_enabled",
    "leaky_relu",
    "logsumexp",
    "maximum",
    "no_grad",
    "pad",
]
