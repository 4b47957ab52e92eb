"""Minimal reverse-mode autodiff, Adam and a cosine schedule."""

from mioir.nncore.optim import AdamState, CosineSchedule, adam_step, lr_at
from mioir.nncore.tensor import (
    Tensor,
    add,
    as_tensor,
    channel_affine,
    conv2d,
    default_dtype,
    dense,
    global_avg_pool,
    l1_loss,
    leaky_relu,
    mean,
    mul,
    parameter,
    precision,
    relu,
    set_nan_check,
    slice_last,
    softmax,
    softmax_cross_entropy,
)

__all__ = [
    "AdamState",
    "CosineSchedule",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "channel_affine",
    "conv2d",
    "default_dtype",
    "dense",
    "global_avg_pool",
    "l1_loss",
    "leaky_relu",
    "lr_at",
    "mean",
    "mul",
    "parameter",
    "precision",
    "relu",
    "set_nan_check",
    "slice_last",
    "softmax",
    "softmax_cross_entropy",
]
