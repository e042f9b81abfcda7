from .autodiff import (
    EPS,
    DomainError,
    ShapeError,
    Tensor,
    clip_below,
    concat,
    cosine_similarity,
    exact_sum,
    exp,
    l2_norm,
    log,
    matmul,
    mean,
    relu,
    safe_log,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    tensor,
    tsum,
)
from .gradcheck import GradCheckReport, evaluate_with_gradients, finite_difference_check
from .optim import AdamState, NonFiniteGradientError, adam_step
from .rng import make_rng, spawn_seed

__all__ = [
    "EPS",
    "AdamState",
    "DomainError",
    "GradCheckReport",
    "NonFiniteGradientError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "clip_below",
    "concat",
    "cosine_similarity",
    "evaluate_with_gradients",
    "exact_sum",
    "exp",
    "finite_difference_check",
    "l2_norm",
    "log",
    "make_rng",
    "matmul",
    "mean",
    "relu",
    "safe_log",
    "sigmoid",
    "softmax",
    "spawn_seed",
    "take_rows",
    "tanh",
    "tensor",
    "tsum",
]
