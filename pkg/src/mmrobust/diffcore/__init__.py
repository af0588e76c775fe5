from .ops import (
    absolute,
    add,
    clamp,
    conv2d,
    conv2d_valid,
    cross_entropy,
    kl_div,
    kl_rows_np,
    matmul,
    maxpool2,
    maxpool2_np,
    mul,
    relu,
    reshape,
    scale,
    sign,
    softmax,
    softmax_np,
    spike,
    sub,
    surrogate_np,
    total,
)
from .rng import RngStream
from .tape import Node, ShapeError, Tape, finite_difference_check

__all__ = [
    "Node", "ShapeError", "Tape", "RngStream", "finite_difference_check",
    "absolute", "add", "clamp", "conv2d", "conv2d_valid", "cross_entropy", "kl_div",
    "kl_rows_np", "matmul", "maxpool2", "maxpool2_np", "mul", "relu", "reshape",
    "scale", "sign", "softmax", "softmax_np", "spike", "sub", "surrogate_np", "total",
]
