"""Differentiable operations.

All functions accept Tensors or array-likes and return Tensors. Integer index
arrays (gather, max positions, top-k masks) are constants: gradients flow
through the gathered values only.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import InvalidArgument
from .tensor import Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgument(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def scalar_scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return make_result(x.data * s, (x,), lambda g: (g * s,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    e = float(exponent)
    out = x.data ** e

    def bw(g):
        return (g * e * x.data ** (e - 1.0),)

    return make_result(out, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    """Square root whose gradient is defined as 0 where the input is 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return make_result(out, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = v2 * 0.044715
    t += 1.0
    t *= v
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = t + 1.0
    out *= v
    out *= 0.5

    def bw(g):
        # d/dv = 0.5 (1 + t) + 0.5 v (1 - t^2) c (1 + 3 a v^2)
        dinner = v2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _SQRT_2_OVER_PI
        sech2 = 1.0 - t * t
        sech2 *= v
        sech2 *= dinner
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return make_result(out, (x,), bw)


# -- linear algebra ---------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidArgument(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidArgument(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise InvalidArgument(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def sqdist(a, b) -> Tensor:
    """Pairwise squared Euclidean distances, (..., n, d) x (..., m, d) -> (..., n, m).

    Each entry accumulates its coordinates in order, so identical rows give
    exactly 0 and the value of a pair never depends on the other rows.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise InvalidArgument(f"sqdist: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    diff = av[..., :, None, 0] - bv[..., None, :, 0]
    out = diff * diff
    for t in range(1, av.shape[-1]):
        diff = av[..., :, None, t] - bv[..., None, :, t]
        out += diff * diff

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = 2.0 * (av * g.sum(axis=-1)[..., None] - g @ bv)
        if b.requires_grad:
            gb = 2.0 * (bv * g.sum(axis=-2)[..., None] - _swap_last(g) @ av)
        return ga, gb

    return make_result(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of an arbitrarily batched ``x``.

    Flattens leading axes so the weight gradient is a single GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise InvalidArgument(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, bw)


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise InvalidArgument(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise InvalidArgument("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise InvalidArgument(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        grads = []
        for i, t in enumerate(ts):
            if not t.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return make_result(out, ts, bw)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise InvalidArgument(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return make_result(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, x.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def scatter_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``out[idx[j]] += rows[j]`` via a stable sort and segment sums.

    Equivalent to ``np.add.at`` with a fixed summation order, and much faster
    on large row blocks.
    """
    out = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    out[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), bw)


def gather(x, idx, batch_dims: int = 0) -> Tensor:
    """Select rows of ``x`` along axis ``batch_dims`` with an integer array.

    With ``batch_dims=0``: ``out[s...] = x[idx[s...]]``.
    With ``batch_dims=1``: ``out[b, s...] = x[b, idx[b, s...]]``.
    The backward pass scatter-adds, so the total gradient mass is conserved.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidArgument(f"gather: index array must be integer, got {idx.dtype}")
    if batch_dims not in (0, 1):
        raise InvalidArgument("gather supports batch_dims 0 or 1")
    n = x.shape[batch_dims]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidArgument(f"gather: index out of range for axis of size {n}")
    if batch_dims == 0:
        flat_x = x.data
        flat_idx = idx
    else:
        b = x.shape[0]
        if idx.shape[0] != b:
            raise InvalidArgument(f"gather: batch size mismatch {x.shape} vs index {idx.shape}")
        flat_x = x.data.reshape((b * n,) + x.shape[2:])
        offsets = (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))
        flat_idx = idx + offsets
    out = flat_x[flat_idx]
    tail = x.shape[batch_dims + 1:]

    def bw(g):
        full = scatter_rows(flat_x.shape[0], flat_idx.reshape(-1), g.reshape((-1,) + tail))
        return (full.reshape(x.shape),)

    return make_result(out, (x,), bw)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, (x,), bw)


def mean_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return make_result(out, (x,), bw)


def max_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bw(g):
        full = np.zeros_like(x.data)
        if not keepdims:
            g = np.expand_dims(g, ax)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return make_result(out, (x,), bw)


# -- normalisation / probabilities -------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


def layernorm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with optional affine terms."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    def bw(g):
        gxhat = g * weight.data if weight is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) if x.requires_grad else None
        grads = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None)
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return make_result(out, parents, bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B x classes) against int labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidArgument(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return make_result(out, (logits,), bw)


# -- generic dispatch -------------------------------------------------------

_OPS = {
    "matmul": matmul,
    "sqdist": sqdist,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_scale": scalar_scale,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather": gather,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "max_reduce": max_reduce,
    "mean_reduce": mean_reduce,
    "sum_reduce": sum_reduce,
    "reshape": reshape,
    "transpose": transpose,
    "linear": linear,
    "cross_entropy": cross_entropy,
}


def forward_op(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Run a named operation, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise InvalidArgument(f"unknown op {op!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)
