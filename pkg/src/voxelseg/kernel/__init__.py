"""Minimal reverse-mode tensor engine used by the segmentation network."""

from .ops import (
    add,
    add_scalar,
    channel_dropout,
    concat_channels,
    conv3d,
    conv3d_transpose,
    div,
    elu,
    instance_norm,
    mul,
    mul_scalar,
    softmax_channels,
    sub,
    tmean,
    tsum,
)
from .optim import init_velocity, sgd_momentum_step
from .rng import make_rng, split_rng
from .tensor import Tape, Tensor, backward, default_dtype, set_default_dtype, tensor, using_dtype, zeros

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "add_scalar",
    "backward",
    "channel_dropout",
    "concat_channels",
    "conv3d",
    "conv3d_transpose",
    "default_dtype",
    "div",
    "elu",
    "init_velocity",
    "instance_norm",
    "make_rng",
    "mul",
    "mul_scalar",
    "set_default_dtype",
    "sgd_momentum_step",
    "softmax_channels",
    "split_rng",
    "sub",
    "tensor",
    "tmean",
    "tsum",
    "using_dtype",
    "zeros",
]
