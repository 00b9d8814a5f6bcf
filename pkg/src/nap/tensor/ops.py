"""Differentiable operations over :class:`nap.tensor.core.Tensor`.

Every op returns a new Tensor wired into the autograd graph when any
input is tracked. Gradients are exact analytic forms; the test suite
checks each one against central finite differences.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from nap.errors import DegenerateInputError, ShapeError
from nap.tensor.core import Tensor, as_tensor

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MASK_FILL = -1e30  # additive pre-softmax fill; exp() underflows to exactly 0.0


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)

    def backward(g):
        return (g * s,)

    return Tensor._from_op(x.data * s, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcast batch dimensions: [..., m, k] @ [..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(data, (a, b), backward)


# -- shape manipulation --------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape

    def backward(g):
        return (np.ascontiguousarray(g.reshape(old)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.reshape(shape)), (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(xs), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    full_shape = x.shape

    def backward(g):
        out = np.zeros(full_shape, dtype=np.float64)
        out[index] = g
        return (out,)

    return Tensor._from_op(np.ascontiguousarray(x.data[index]), (x,), backward)


# -- nonlinearities -------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x), with Phi the standard normal CDF."""
    x = as_tensor(x)
    cdf = ndtr(x.data)
    data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(data, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    data = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(pos, 1.0, slope),)

    return Tensor._from_op(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max-subtraction)."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError(f"softmax: empty axis {axis} in shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Tensor._from_op(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return Tensor._from_op(data, (x, gain, bias), backward)


# -- pooling / lookup ------------------------------------------------------------


def mean_pool(x: Tensor, mask) -> Tensor:
    """Mean of x[..., s, :] over positions where mask[..., s] is truthy.

    ``mask`` is a plain array (no gradient flows through it). Raises
    DegenerateInputError if any row has no unmasked position.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mean_pool: mask shape {m.shape} != positions shape {x.shape[:-1]}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise DegenerateInputError("mean_pool: a row has all positions masked")
    data = (x.data * m[..., None]).sum(axis=-2) / counts[..., None]

    def backward(g):
        return (m[..., None] * g[..., None, :] / counts[..., None, None],)

    return Tensor._from_op(data, (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]; gradients scatter-add."""
    table = as_tensor(table)
    ids_arr = np.asarray(ids, dtype=np.int64)
    if np.any(ids_arr < 0) or np.any(ids_arr >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids_arr]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids_arr.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(np.ascontiguousarray(data), (table,), backward)


# -- losses ------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax probability of the target classes.

    ``logits`` is [n, n_classes]; ``targets`` is a length-n integer vector.
    Rows whose target equals ``ignore_index`` contribute nothing and are
    excluded from the mean.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    if t.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {t.shape} != ({logits.shape[0]},)")
    n_classes = logits.shape[1]
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else (t != ignore_index)
    if not valid.any():
        raise DegenerateInputError("cross_entropy: no valid targets in batch")
    checked = t[valid]
    if np.any(checked < 0) or np.any(checked >= n_classes):
        bad = checked[(checked < 0) | (checked >= n_classes)][0]
        raise IndexError(f"cross_entropy: target {bad} out of range for {n_classes} classes")

    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m  # [n,1]
    rows = np.arange(t.shape[0])
    per_row = np.where(valid, lse[:, 0] - logits.data[rows, np.where(valid, t, 0)], 0.0)
    n_valid = int(valid.sum())
    data = np.asarray(per_row.sum() / n_valid)

    def backward(g):
        p = np.exp(logits.data - lse)  # softmax
        p[rows[valid], t[valid]] -= 1.0
        p[~valid] = 0.0
        return (g * p / n_valid,)

    return Tensor._from_op(data, (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.full_like(x.data, float(g)),)

    return Tensor._from_op(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def backward(g):
        return (np.full_like(x.data, float(g) / n),)

    return Tensor._from_op(np.asarray(x.data.mean()), (x,), backward)


# -- regularization ------------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: p must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward)


# -- attention --------------------------------------------------------------------------


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask,
                         n_heads: int, return_weights: bool = False):
    """Scaled dot-product attention over ``n_heads`` splits of the last dim.

    q, k, v are [batch, seq, d] with d divisible by n_heads. ``mask`` is an
    optional [batch, seq] array of 1/0 key-visibility flags; masked keys get
    an additive -1e30 before the softmax, so their weight underflows to 0.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects [batch, seq, d] inputs")
    b, s, d = q.shape
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def split(x):
        return permute(reshape(x, (b, s, n_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = scale(matmul(qh, permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != (b, s):
            raise ShapeError(f"attention mask shape {m.shape} != ({b}, {s})")
        scores = add(scores, Tensor((1.0 - m)[:, None, None, :] * _MASK_FILL))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)
    out = reshape(permute(ctx, (0, 2, 1, 3)), (b, s, d))
    if return_weights:
        return out, weights.data.copy()
    return out
