"""Small dense tensor engine with tape-based reverse-mode differentiation."""

from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    add,
    clip,
    concat,
    conv2d,
    depthwise_xcorr,
    detach,
    div,
    elementwise,
    exp,
    index,
    instance_norm,
    log,
    max_with_argmax,
    maximum,
    minimum,
    mul,
    neg,
    pow,
    reduce,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    sub,
)
from .serialize import dumps, loads, read_tensor, write_tensor
from .tensor import (
    ContractError,
    DimensionError,
    DomainError,
    EmptyInputError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    current_tape,
    get_default_dtype,
    no_tape,
    set_default_dtype,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "DomainError",
    "EmptyInputError",
    "GradcheckReport",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "clip",
    "concat",
    "conv2d",
    "current_tape",
    "depthwise_xcorr",
    "detach",
    "div",
    "dumps",
    "elementwise",
    "exp",
    "get_default_dtype",
    "gradcheck",
    "index",
    "instance_norm",
    "loads",
    "log",
    "max_with_argmax",
    "maximum",
    "minimum",
    "mul",
    "neg",
    "no_tape",
    "pow",
    "read_tensor",
    "reduce",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softplus",
    "stack",
    "sub",
    "write_tensor",
]
