from app.numerics.matrix import (
    DTYPE,
    NormalizedRows,
    as_matrix,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    row_entropy,
    softmax_rows,
)
from app.numerics.autograd import GradientTape, Variable, backward, constant, detach
from app.numerics.finite_diff import central_difference, compare_gradients, max_relative_error

__all__ = [
    "DTYPE",
    "NormalizedRows",
    "as_matrix",
    "l2_normalize_rows",
    "log_softmax_rows",
    "matmul",
    "row_entropy",
    "softmax_rows",
    "GradientTape",
    "Variable",
    "backward",
    "constant",
    "detach",
    "central_difference",
    "compare_gradients",
    "max_relative_error",
]
