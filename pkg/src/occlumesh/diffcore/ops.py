"""Differentiable operations on :class:`Tensor`.

Every function accepts Tensors or array-likes and returns a Tensor.  The
backward closures only capture what they need.
"""
from __future__ import annotations

import builtins
import math

import numpy as np

from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    pass


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                             unbroadcast(g * ad, bd.shape) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb
    return record(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _t(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def power(a, p) -> Tensor:
    """``a ** p``; ``p`` may be a python number or a (learnable) Tensor."""
    a = _t(a)
    ad = a.data
    if not isinstance(p, Tensor):
        p = float(p)
        out = ad ** p
        return record(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")
    pd = p.data.astype(ad.dtype, copy=False)
    out = ad ** pd

    def backward(g):
        ga = unbroadcast(g * pd * ad ** (pd - 1), ad.shape) if a.requires_grad else None
        gp = None
        if p.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.where(ad > 0, np.log(np.where(ad > 0, ad, 1)), 0)
            gp = unbroadcast(g * out * lg, pd.shape)
        return ga, gp
    return record(out, (a, p), backward, "pow")


def sqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:
    a = _t(a)
    sgn = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def sin(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return record(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return record(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _t(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1 / (1 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1 + e)
    return record(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay reliable)."""
    a = _t(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    out = 0.5 * x * (1 + th)

    def backward(g):
        du = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * du),)
    return record(out, (a,), backward, "gelu")


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    a = _t(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return record(out, (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0), sa),
                             unbroadcast(np.where(cond, 0, g), sb)), "where")


def stop_gradient(a) -> Tensor:
    return Tensor(_t(a).data)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold the batch into one GEMM instead of summing B partial products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return record(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j) -> Tensor:
    a = _t(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def expand_dims(a, axis) -> Tensor:
    a = _t(a)
    shape = list(a.shape)
    if axis < 0:
        axis += a.ndim + 1
    shape.insert(axis, 1)
    return reshape(a, tuple(shape))


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    sa = a.shape
    return record(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, sa),), "broadcast")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    ref = next((t for t in tensors if t.requires_grad), tensors[0])
    tensors = [t if t.dtype == ref.dtype or t.requires_grad else Tensor(t.data.astype(ref.dtype))
               for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        idx = [builtins.slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = builtins.slice(lo, hi)
            res.append(g[tuple(idx)])
        return tuple(res)
    return record(out, tuple(tensors), backward, "concat")


def stack(tensors, axis=0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def scatter_rows(n: int, index, vals) -> np.ndarray:
    """Sum the rows of ``vals`` (K, ...) into ``n`` buckets chosen by ``index`` (K,).

    Sort plus ``reduceat``: far faster than ``np.add.at`` and the summation
    order is fixed, so results are reproducible bit for bit.
    """
    index = np.asarray(index).reshape(-1)
    flat = vals.reshape(index.size, int(np.prod(vals.shape[1:], dtype=np.int64)))
    out = np.zeros((n, flat.shape[1]), dtype=vals.dtype)
    if index.size:
        order = np.argsort(index, kind="stable")
        si = index[order]
        starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
        out[si[starts]] = np.add.reduceat(flat[order], starts, axis=0)
    return out.reshape((n,) + vals.shape[1:])


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    a = _t(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return record(np.array(out, copy=True) if basic else out, (a,), backward, "getitem")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, builtins.slice)) or i is None or i is Ellipsis for i in items)


slice = getitem


def take(a, indices, axis=0) -> Tensor:
    """Gather entries along ``axis`` (``np.take``)."""
    a = _t(a)
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)
    shape, dtype = a.shape, a.dtype
    ax = axis % a.ndim

    def backward(g):
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        gm = gm.reshape((indices.size,) + gm.shape[indices.ndim:])
        moved = scatter_rows(shape[ax], indices, np.ascontiguousarray(gm, dtype=dtype))
        return (np.moveaxis(moved, 0, ax),)
    return record(out, (a,), backward, "take")


gather = take


def take_along_axis(a, indices, axis) -> Tensor:
    a = _t(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        _add_along_axis(full, indices, g, axis)
        return (full,)
    return record(out, (a,), backward, "take_along_axis")


def _add_along_axis(full, indices, g, axis):
    axis = axis % full.ndim
    grids = np.ogrid[tuple(builtins.slice(0, n) for n in indices.shape)]
    idx = [np.broadcast_to(gr, indices.shape) for gr in grids]
    idx[axis] = indices
    lin = np.ravel_multi_index(tuple(idx), full.shape)
    full += np.bincount(lin.reshape(-1), weights=np.asarray(g, dtype=np.float64).reshape(-1),
                        minlength=full.size).reshape(full.shape).astype(full.dtype)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return record(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / n)


def max_detached(a, axis=None, keepdims=False) -> np.ndarray:
    return _t(a).data.max(axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp; the shift is a constant so gradients are exact."""
    a = _t(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = sum(exp(sub(a, Tensor(m))), axis=axis, keepdims=True)
    out = add(log(s), Tensor(m))
    if not keepdims:
        out = reshape(out, tuple(n for i, n in enumerate(out.shape) if i != axis % a.ndim))
    return out


# ---------------------------------------------------------------- normalisation

def softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return record(out, (a,), backward, "softmax")


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale/shift."""
    a = _t(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward(g):
        return (rstd * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)
    out = record(xhat, (a,), backward, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def l2_normalize(a, axis=-1, eps: float = 1e-12) -> Tensor:
    a = _t(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / denom,)
    return record(out, (a,), backward, "l2_normalize")
