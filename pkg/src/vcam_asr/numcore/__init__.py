"""Minimal dense-tensor arithmetic with reverse-mode differentiation."""
from . import ops
from .container import ContainerError, load, save
from .ops import (add, concat, constant, conv1d_time, conv2d, conv_gather, dropout, embedding, exp, gelu,
                  index, layer_norm, log, log1p, log_softmax, logsumexp, matmul, mean, mul,
                  outer_add, relu, reshape, scale, softmax, softmax_rows, sub, swap_last, tanh,
                  transpose)
from .ops import sum as reduce_sum
from .tensor import (NumericError, ShapeError, Tape, Tensor, active_tape, backward,
                     default_dtype, make_result, no_record, precision)

__all__ = [
    "ops", "Tensor", "Tape", "backward", "precision", "default_dtype", "no_record",
    "active_tape", "make_result", "NumericError", "ShapeError", "ContainerError", "save", "load",
    "add", "sub", "mul", "scale", "matmul", "softmax", "softmax_rows", "log_softmax",
    "layer_norm", "exp", "log", "log1p", "logsumexp", "embedding", "concat", "index", "reshape",
    "transpose", "swap_last", "conv2d", "conv1d_time", "conv_gather", "relu", "gelu", "tanh", "dropout",
    "outer_add", "reduce_sum", "mean", "constant",
]
