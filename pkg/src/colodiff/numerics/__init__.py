"""Minimal dense tensor library with reverse-mode differentiation."""

from . import cdt
from .gradcheck import check_gradients, gradient_pairs, numerical_grad, relative_error
from .ops import (
    add,
    cross_entropy,
    gated_residual,
    gelu,
    layer_norm,
    linear,
    log_softmax_last,
    matmul,
    mean_all,
    modulate,
    mse,
    mul,
    permute,
    reshape,
    softmax_last,
    sub,
    sum_all,
    take_rows,
    transpose_time_space,
)
from .tensor import Tape, Tensor, as_tensor, backward, default_dtype, no_record, precision, record

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "cdt",
    "check_gradients",
    "cross_entropy",
    "default_dtype",
    "gated_residual",
    "gelu",
    "gradient_pairs",
    "layer_norm",
    "linear",
    "log_softmax_last",
    "matmul",
    "mean_all",
    "modulate",
    "mse",
    "mul",
    "no_record",
    "numerical_grad",
    "permute",
    "precision",
    "record",
    "relative_error",
    "reshape",
    "softmax_last",
    "sub",
    "sum_all",
    "take_rows",
    "transpose_time_space",
]
