"""Elementwise, reduction and shape operations with gradients."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _is_scalar, add_macs, as_tensor, record_op


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_add(a, b)
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_add(a, -b)
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scalar_mul(a, b)
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op("scalar_mul", a.data * a.dtype.type(s), (a,), lambda g: (g * s,))


def scalar_add(a: Tensor, s: float) -> Tensor:
    return record_op("scalar_add", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scalar_mul": scalar_mul, "scalar_add": scalar_add}


def elementwise(kind: str, a, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


# --- pointwise nonlinearities -------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # tanh form is stable for large |x|
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return record_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record_op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    pos = x.data >= 0
    a = x.dtype.type(alpha)
    out = np.where(pos, x.data, x.data * a)
    return record_op("leaky_relu", out, (x,), lambda g: (np.where(pos, g, g * a),))


def activation(kind: str, x: Tensor, alpha: float = 0.01) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    raise ValueError(f"unknown activation {kind!r}")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(x.data)  # subgradient 0 at 0
    return record_op("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record_op("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log of non-positive value")
    xd = x.data
    return record_op("log", np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    return record_op("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions ----------------------------------------------------------

def _norm_axes(x: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(sorted(a % x.ndim for a in axes)) if x.ndim else tuple(axes)
    if len(axes) == 0:
        raise ValueError("empty reduction axis set")
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated reduction axes {axes}")
    return axes


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(x, axes)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(x, axes)
    n = int(np.prod([x.shape[a] for a in ax]))
    return scalar_mul(sum(x, ax, keepdims), 1.0 / n)


def reduce(kind: str, x: Tensor, axes=None) -> Tensor:
    if kind == "sum":
        return sum(x, axes)
    if kind == "mean":
        return mean(x, axes)
    raise ValueError(f"unknown reduction {kind!r}")


# --- shape manipulation --------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    nd = len(ref)
    axis %= nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis %= x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return record_op("slice", x.data[idx], (x,), bw)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one position along ``axis`` and drop that axis."""
    axis %= x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = index
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return record_op("select", x.data[idx], (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shape mismatch {tensors[0].shape} vs {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    n = len(tensors)
    return record_op("stack", data, tensors, lambda g: [np.take(g, i, axis=ax) for i in range(n)])


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each entry ``repeats`` times along ``axis`` (like ``np.repeat``)."""
    axis %= x.ndim
    shape = x.shape

    def bw(g):
        split = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(split).sum(axis=axis + 1),)

    return record_op("repeat", np.repeat(x.data, repeats, axis=axis), (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [B, F] and ``weight`` [O, F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    add_macs(x.shape[0] * wd.size)
    out = xd @ wd.T
    if bias is None:
        return record_op("linear", out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return record_op("linear", out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))
