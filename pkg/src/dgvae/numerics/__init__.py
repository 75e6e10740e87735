from .adam import AdamState, adam_step
from .gradcheck import GradcheckReport, gradcheck
from .sparse import SparseMatrix, dense_sparse_matmul, sparse_dense_matmul
from .tensor import (
    Tensor,
    absolute,
    backward,
    clamp_min,
    exp,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    sigmoid,
    softmax,
    softplus,
    softplus_np,
    stack,
    swapaxes,
    tanh,
)

__all__ = [
    "AdamState",
    "GradcheckReport",
    "SparseMatrix",
    "Tensor",
    "absolute",
    "adam_step",
    "backward",
    "clamp_min",
    "dense_sparse_matmul",
    "exp",
    "gradcheck",
    "l2_normalize",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "sigmoid",
    "softmax",
    "softplus",
    "softplus_np",
    "sparse_dense_matmul",
    "stack",
    "swapaxes",
    "tanh",
]
