"""Small deterministic tensor engine with reverse-mode autodiff."""

from .gradcheck import GradCheckReport, finite_diff_check
from .nn import (
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    multi_head_attention,
    sinusoidal_positions,
    small_normal,
    uniform_fan_in,
)
from .ops import (
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    mse_loss,
    relu,
    scaled_dot_product_attention,
    softmax,
)
from .optim import LrSchedule, OptimizerState, adam_step, lr_at
from .tensor import DimensionError, Parameter, Tensor, concat, matmul, no_grad, take_rows, tensor

__all__ = [
    "DimensionError",
    "EncoderLayer",
    "FeedForward",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "LrSchedule",
    "Module",
    "MultiHeadAttention",
    "OptimizerState",
    "Parameter",
    "Tensor",
    "adam_step",
    "concat",
    "cross_entropy",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "log_softmax",
    "lr_at",
    "matmul",
    "mse_loss",
    "multi_head_attention",
    "no_grad",
    "relu",
    "scaled_dot_product_attention",
    "sinusoidal_positions",
    "small_normal",
    "softmax",
    "take_rows",
    "tensor",
    "uniform_fan_in",
]
