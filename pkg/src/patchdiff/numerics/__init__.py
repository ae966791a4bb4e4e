"""Minimal differentiable array engine used by the denoiser."""

from . import ops
from .optim import Adam, AdamState, adam_update
from .tensor import (AllocCounter, Tensor, backward, no_grad, scoped_peak,
                     track_allocations)
from .ops import (avg_pool2d, concat, conv2d, group_norm, linear, self_attention,
                  silu, softmax)

__all__ = [
    "Adam", "AdamState", "AllocCounter", "Tensor", "adam_update", "avg_pool2d",
    "backward", "concat", "conv2d", "group_norm", "linear", "no_grad", "ops",
    "scoped_peak", "self_attention", "silu", "softmax", "track_allocations",
]
