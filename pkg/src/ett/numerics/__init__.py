from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .tensor import (
    LN_EPS,
    Function,
    NonFiniteError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    cosine_matrix,
    cosine_similarity,
    default_dtype,
    get_default_dtype,
    exp,
    gelu,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    reshape,
    softmax,
    sqrt,
    transpose,
    tsum,
)

__all__ = [
    "LN_EPS", "Function", "GradCheckReport", "NonFiniteError", "ParamCheck", "Tensor",
    "as_tensor", "broadcast_to", "concat", "cosine_matrix", "cosine_similarity", "default_dtype", "exp", "get_default_dtype",
    "gelu", "grad_check", "is_grad_enabled", "l2_normalize", "layer_norm", "log",
    "log_softmax", "matmul", "mean", "no_grad", "reshape", "softmax", "sqrt",
    "transpose", "tsum",
]
