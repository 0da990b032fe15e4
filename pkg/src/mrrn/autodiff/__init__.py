"""Minimal reverse-mode autodiff engine for 4-D feature maps."""

from .adam import Adam, AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BatchNormStats,
    ShapeError,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    softmax,
    softmax_ce_loss,
    sum_all,
    upsample_nearest,
    upsample_nearest2x,
)
from .tensor import Tape, Tensor, backward, no_grad, resolve_dtype

__all__ = [
    "Adam", "AdamState", "adam_step", "GradCheckReport", "grad_check", "BatchNormStats",
    "ShapeError", "add", "batch_norm", "concat_channels", "conv2d", "maxpool2x2", "relu",
    "softmax", "softmax_ce_loss", "sum_all", "upsample_nearest", "upsample_nearest2x",
    "Tape", "Tensor", "backward", "no_grad", "resolve_dtype",
]
