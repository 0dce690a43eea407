"""Strided/dilated/grouped 3D convolution, its transpose, batch norm and resampling.

Convolution is cross-correlation (no kernel flip).  Inputs are laid out as
``[B, C, T, H, W]``; weights as ``[C_out, C_in/groups, k_t, k_h, k_w]`` for
:func:`conv3d` and ``[C_in, C_out/groups, k_t, k_h, k_w]`` for
:func:`conv_transpose3d`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, add_macs, record_op


class ConvSpecError(ShapeError):
    pass


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(v)
    if len(v) != 3:
        raise ConvSpecError(f"expected 3 values, got {v}")
    return v


def _pad_pairs(p) -> tuple:
    out = []
    for item in _triple(p):
        if isinstance(item, (int, np.integer)):
            out.append((int(item), int(item)))
        else:
            lo, hi = item
            out.append((int(lo), int(hi)))
    return tuple(out)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution.

    ``padding`` holds one entry per axis, either a symmetric int or a
    ``(before, after)`` pair; even kernels need the asymmetric form to keep
    "same" extents.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    pads: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "dilation", _triple(self.dilation))
        object.__setattr__(self, "pads", _pad_pairs(self.padding))
        for name in ("kernel", "stride", "dilation"):
            if any(int(v) < 1 for v in getattr(self, name)):
                raise ConvSpecError(f"{name} must be positive, got {getattr(self, name)}")
        if any(lo < 0 or hi < 0 for lo, hi in self.pads):
            raise ConvSpecError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ConvSpecError("channels and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConvSpecError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups {self.groups}"
            )

    @classmethod
    def same(cls, in_channels, out_channels, kernel, dilation=(1, 1, 1), stride=(1, 1, 1), groups=1):
        """Padding that keeps extents (before striding): total d*(k-1) per axis."""
        kernel, dilation = _triple(kernel), _triple(dilation)
        pads = []
        for k, d in zip(kernel, dilation):
            total = d * (k - 1)
            pads.append((total // 2, total - total // 2))
        return cls(in_channels, out_channels, kernel, stride, dilation, tuple(pads), groups)

    @property
    def kernel_volume(self) -> int:
        return int(np.prod(self.kernel))

    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def transpose_weight_shape(self) -> tuple:
        return (self.in_channels, self.out_channels // self.groups) + self.kernel

    def output_extent(self, extent) -> tuple:
        """Per-axis ``floor((in + pads - d*(k-1) - 1)/s) + 1``; raises if any is < 1."""
        extent = _triple(extent)
        out = []
        for n, k, s, d, (lo, hi) in zip(extent, self.kernel, self.stride, self.dilation, self.pads):
            o = (n + lo + hi - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ConvSpecError(f"non-positive output extent for input {extent} with {self}")
            out.append(o)
        return tuple(out)

    def transpose_output_extent(self, extent) -> tuple:
        extent = _triple(extent)
        out = []
        for n, k, s, d, (lo, hi) in zip(extent, self.kernel, self.stride, self.dilation, self.pads):
            o = (n - 1) * s - lo - hi + d * (k - 1) + 1
            if o < 1:
                raise ConvSpecError(f"non-positive transposed extent for input {extent} with {self}")
            out.append(o)
        return tuple(out)


def _pad(x: np.ndarray, pads) -> np.ndarray:
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def _unpad(x: np.ndarray, pads) -> np.ndarray:
    idx = [slice(None), slice(None)]
    for (lo, hi), n in zip(pads, x.shape[2:]):
        idx.append(slice(lo, n - hi))
    return x[tuple(idx)]


def _im2col(xp: np.ndarray, spec: ConvSpec, out_ext: tuple) -> np.ndarray:
    """Columns ``[G, (C/G)*K, B*To*Ho*Wo]`` from a padded input."""
    B, C = xp.shape[:2]
    G = spec.groups
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    dt, dh, dw = spec.dilation
    To, Ho, Wo = out_ext
    span = (dt * (kt - 1) + 1, dh * (kh - 1) + 1, dw * (kw - 1) + 1)
    win = sliding_window_view(xp, span, axis=(2, 3, 4))
    win = win[:, :, : st * (To - 1) + 1 : st, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw, ::dt, ::dh, ::dw]
    win = win.reshape(B, G, C // G, To, Ho, Wo, kt, kh, kw)
    cols = win.transpose(1, 2, 6, 7, 8, 0, 3, 4, 5)
    return cols.reshape(G, (C // G) * kt * kh * kw, B * To * Ho * Wo)


def _col2im(cols: np.ndarray, padded_shape: tuple, spec: ConvSpec, out_ext: tuple) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a padded input."""
    B, C = padded_shape[:2]
    G = spec.groups
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    dt, dh, dw = spec.dilation
    To, Ho, Wo = out_ext
    # one transpose up front so every tap below is a contiguous [B, C, To, Ho, Wo] block
    c6 = np.ascontiguousarray(cols.reshape(C, kt, kh, kw, B, To, Ho, Wo).transpose(1, 2, 3, 4, 0, 5, 6, 7))
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kt):
        ta = slice(a * dt, a * dt + st * (To - 1) + 1, st)
        for b in range(kh):
            hb = slice(b * dh, b * dh + sh * (Ho - 1) + 1, sh)
            for c in range(kw):
                wc = slice(c * dw, c * dw + sw * (Wo - 1) + 1, sw)
                xp[:, :, ta, hb, wc] += c6[a, b, c]
    return xp


def _check_input(x: Tensor, channels: int, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected [B,C,T,H,W] input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, spec expects {channels}")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    _check_input(x, spec.in_channels, "conv3d")
    if weight.shape != spec.weight_shape():
        raise ShapeError(f"conv3d: weight shape {weight.shape} != {spec.weight_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({spec.out_channels},)")
    out_ext = spec.output_extent(x.shape[2:])
    B = x.shape[0]
    G, O = spec.groups, spec.out_channels
    xp = _pad(x.data, spec.pads)
    cols = _im2col(xp, spec, out_ext)
    w2 = weight.data.reshape(G, O // G, -1)
    add_macs(w2.size * cols.shape[2])
    out = np.matmul(w2, cols)  # [G, O/G, N]
    out = out.reshape((O, B) + out_ext).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1, 1)
    out = np.ascontiguousarray(out)
    padded_shape = xp.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(G, O // G, -1)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(w2.transpose(0, 2, 1), g2)
            gx = _unpad(_col2im(dcols, padded_shape, spec, out_ext), spec.pads)
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return record_op("conv3d", out, inputs, bw)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Transposed convolution: the input-gradient of :func:`conv3d` with learnable weights.

    ``spec.in_channels`` are the channels of ``x``; output extent is
    ``(n-1)*s - pads + d*(k-1) + 1`` per axis.
    """
    _check_input(x, spec.in_channels, "conv_transpose3d")
    if weight.shape != spec.transpose_weight_shape():
        raise ShapeError(f"conv_transpose3d: weight shape {weight.shape} != {spec.transpose_weight_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv_transpose3d: bias shape {bias.shape} != ({spec.out_channels},)")
    in_ext = tuple(x.shape[2:])
    out_ext = spec.transpose_output_extent(in_ext)
    B = x.shape[0]
    G, Ci, O = spec.groups, spec.in_channels, spec.out_channels
    padded = tuple(n + lo + hi for n, (lo, hi) in zip(out_ext, spec.pads))
    padded_shape = (B, O) + padded
    # the equivalent forward conv maps O -> Ci channels over the padded output
    fwd = ConvSpec(O, Ci, spec.kernel, spec.stride, spec.dilation, 0, G)
    w2 = weight.data.reshape(G, Ci // G, -1)  # [G, Ci/G, (O/G)*K]
    xd = x.data.transpose(1, 0, 2, 3, 4).reshape(G, Ci // G, -1)
    add_macs(w2.size * xd.shape[2])
    cols = np.matmul(w2.transpose(0, 2, 1), xd)
    out = _unpad(_col2im(cols, padded_shape, fwd, in_ext), spec.pads)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1, 1)
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gcols = _im2col(_pad(g, spec.pads), fwd, in_ext)  # [G, (O/G)*K, N]
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape((Ci, B) + in_ext).transpose(1, 0, 2, 3, 4)
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.matmul(xd, gcols.transpose(0, 2, 1)).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return record_op("conv_transpose3d", out, inputs, bw)


class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.initialized = False

    def mark_initialized(self) -> None:
        self.initialized = True


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel over every non-channel axis.

    Training mode uses batch statistics and updates ``stats`` (unbiased
    variance, momentum ``stats.momentum``); eval mode uses ``stats`` and
    refuses to run before they were ever populated.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = stats.momentum
        unbiased = var.reshape(C) * (n / max(n - 1, 1))
        stats.mean = (1 - m) * stats.mean + m * mu.reshape(C)
        stats.var = (1 - m) * stats.var + m * unbiased
        stats.initialized = True
        out = xhat * g_ + beta.data.reshape(bshape)

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            dxhat = g * g_
            gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, gg, gb

        return record_op("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)

    if not stats.initialized:
        raise RuntimeError("batch_norm in eval mode before running statistics exist")
    rm = stats.mean.reshape(bshape).astype(x.dtype)
    inv = (1.0 / np.sqrt(stats.var + eps)).reshape(bshape).astype(x.dtype)
    xhat = (x.data - rm) * inv
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw_eval(g):
        return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record_op("batch_norm", out, (x, gamma, beta), bw_eval)


def upsample_nearest(x: Tensor, factor=(1, 2, 2)) -> Tensor:
    """Nearest-neighbour replication along T, H, W; gradient is the block sum."""
    ft, fh, fw = _triple(factor)
    if min(ft, fh, fw) < 1:
        raise ValueError(f"upsample factors must be >= 1, got {factor}")
    d = x.data
    if ft > 1:
        d = np.repeat(d, ft, axis=2)
    if fh > 1:
        d = np.repeat(d, fh, axis=3)
    if fw > 1:
        d = np.repeat(d, fw, axis=4)
    B, C, T, H, W = x.shape

    def bw(g):
        return (g.reshape(B, C, T, ft, H, fh, W, fw).sum(axis=(3, 5, 7)),)

    return record_op("upsample_nearest", np.ascontiguousarray(d), (x,), bw)


def avg_pool(x: Tensor, kernel=(1, 2, 2)) -> Tensor:
    """Non-overlapping average pooling; extents must divide evenly."""
    kt, kh, kw = _triple(kernel)
    B, C, T, H, W = x.shape
    if T % kt or H % kh or W % kw:
        raise ShapeError(f"avg_pool: extents {(T, H, W)} not divisible by {(kt, kh, kw)}")
    shp = (B, C, T // kt, kt, H // kh, kh, W // kw, kw)
    out = x.data.reshape(shp).mean(axis=(3, 5, 7))
    scale = 1.0 / (kt * kh * kw)

    def bw(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None, :, None] * scale, shp)
        return (gg.reshape(x.shape).copy(),)

    return record_op("avg_pool", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, C, ...]`` -> ``[B, C]``."""
    B, C = x.shape[:2]
    n = x.data[0, 0].size
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g.reshape((B, C) + (1,) * (len(shape) - 2)) / n, shape).copy(),)

    return record_op("global_avg_pool", x.data.reshape(B, C, -1).mean(axis=2), (x,), bw)
