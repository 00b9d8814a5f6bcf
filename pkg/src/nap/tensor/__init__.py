"""Minimal f64 tensor library with reverse-mode autodiff."""

from nap.tensor.core import Tensor, as_tensor, collect_leaves, grad_enabled, no_grad
from nap.tensor.io import assign_params, load_params, save_params
from nap.tensor.ops import (
    add,
    concat,
    cross_entropy,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    leaky_relu,
    matmul,
    mean_all,
    mean_pool,
    mul,
    multi_head_attention,
    permute,
    reshape,
    scale,
    slice_axis,
    softmax,
    sum_all,
)
from nap.tensor.optim import AdamW, lr_at

__all__ = [
    "Tensor", "as_tensor", "collect_leaves", "grad_enabled", "no_grad",
    "add", "mul", "scale", "matmul", "reshape", "permute", "concat", "slice_axis",
    "gelu", "leaky_relu", "softmax", "layer_norm", "mean_pool", "embedding_lookup",
    "cross_entropy", "sum_all", "mean_all", "dropout", "multi_head_attention",
    "AdamW", "lr_at", "save_params", "load_params", "assign_params",
]
