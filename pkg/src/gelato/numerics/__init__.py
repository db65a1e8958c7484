"""Dense float64 tensor math: autodiff graph, layer primitives, parameter
store, gradient clipping and verification, and the kernel backends."""

from .autodiff import (
    Var,
    affine,
    as_var,
    backward,
    causal_softmax,
    concat_rows,
    cosine,
    diagonal,
    gather_concat_rows,
    gelu,
    l2_normalize,
    last_row,
    layer_norm,
    log_softmax_rows,
    matmul,
    mul,
    neg,
    normalize_rows,
    prefix_cols,
    reshape,
    rotary,
    scale,
    softmax_rows,
    stack_rows,
    swapaxes,
    transpose,
    vsum,
    sum_squares,
    add,
)
from .kernels import backend
from .params import Param, ParamSet, clip_global_norm, global_grad_norm, grad_check

__all__ = [
    "Var", "as_var", "backward",
    "add", "mul", "neg", "scale", "reshape", "swapaxes", "transpose",
    "concat_rows", "stack_rows", "last_row", "prefix_cols", "diagonal",
    "vsum", "sum_squares", "gather_concat_rows",
    "matmul", "affine",
    "gelu", "layer_norm", "softmax_rows", "causal_softmax",
    "log_softmax_rows", "rotary",
    "l2_normalize", "normalize_rows", "cosine",
    "Param", "ParamSet", "clip_global_norm", "global_grad_norm", "grad_check",
    "backend",
]
