"""Minimal dense-tensor engine: autodiff, layer primitives, and Adam."""

from .gradcheck import grad_check
from .layers import (
    BatchNormState,
    NormalizationStateError,
    batch_norm,
    conv2d,
    max_pool2,
    upsample_nearest,
)
from .optim import NonFiniteGradientError, OptimizerState, adam_step, xavier_uniform_init
from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    gather_rows,
    log,
    logsumexp,
    matmul,
    mul,
    neg,
    normalize_rows,
    reduce_min,
    relu,
    reshape,
    select_index,
    softmax_np,
    sqrt,
    stack_scalars,
    sub,
    take,
    take_pairs,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "BatchNormState",
    "NonFiniteGradientError",
    "NormalizationStateError",
    "NumericsError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "batch_norm",
    "concat",
    "conv2d",
    "exp",
    "gather_rows",
    "grad_check",
    "log",
    "logsumexp",
    "matmul",
    "max_pool2",
    "mul",
    "neg",
    "normalize_rows",
    "reduce_min",
    "relu",
    "reshape",
    "select_index",
    "softmax_np",
    "sqrt",
    "stack_scalars",
    "sub",
    "take",
    "take_pairs",
    "tmean",
    "transpose",
    "tsum",
    "upsample_nearest",
    "xavier_uniform_init",
]
