"""Minimal reverse-mode autodiff over numpy arrays."""

from .ops import (
    activation,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2x2,
    dice_loss,
    dropout,
    max_unpool2d,
    maxpool2d_2x2,
    relu,
    residual_add,
    sigmoid,
    softmax_channels,
    upsample_nearest_2x,
)
from .optim import AdamState, adam_step
from .serialize import load_tensors, save_tensors
from .tensor import Tensor, as_tensor, no_grad

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "activation",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "conv_transpose2x2",
    "dice_loss",
    "dropout",
    "max_unpool2d",
    "maxpool2d_2x2",
    "relu",
    "residual_add",
    "sigmoid",
    "softmax_channels",
    "upsample_nearest_2x",
    "AdamState",
    "adam_step",
    "load_tensors",
    "save_tensors",
]
