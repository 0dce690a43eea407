"""ConvLSTM cell variants, residual Blocks 1-4 and the upsampling layer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .autodiff import ConvSpec, ShapeError, Tensor, ops, upsample_nearest
from .nn import BatchNorm, Conv3d, ConvTranspose3d, Module, Parameter, pointwise, temporal_window


class CellKind(str, Enum):
    REGULAR = "regular"
    SPATIAL_SEPARABLE = "spatial_separable"
    DEPTHWISE_ONLY = "depthwise_only"
    DEPTHWISE_SEPARABLE = "depthwise_separable"


class BlockId(str, Enum):
    BLOCK1 = "block1"
    BLOCK2 = "block2"
    BLOCK3 = "block3"
    BLOCK4 = "block4"


@dataclass
class ConvLstmState:
    h: Tensor  # [B, C_h, H, W]
    c: Tensor


def _gate_macs_per_pixel(kind: CellKind, cx: int, ch: int, k: int) -> int:
    c = cx + ch
    g = 4 * ch
    if kind is CellKind.REGULAR:
        return g * c * k * k
    if kind is CellKind.SPATIAL_SEPARABLE:
        return c * c * k + g * c * k
    if kind is CellKind.DEPTHWISE_ONLY:
        return g * k * k
    if kind is CellKind.DEPTHWISE_SEPARABLE:
        return c * k * k + c * g
    raise ValueError(f"unknown cell kind {kind!r}")


def convlstm_param_count(kind, in_channels: int, hidden_channels: int, kernel: int) -> int:
    """Closed-form learnable parameter count of one cell.

    With ``C = C_x + C_h`` and ``G = 4 C_h`` gate channels:

    * regular:             ``G*C*k^2 + G``
    * spatial separable:   ``C*C*k + G*C*k + G``  (k x 1 to C channels, then 1 x k to G; one bias)
    * depthwise only:      ``G*k^2 + G``           (each gate channel filters one input channel)
    * depthwise separable: ``C*k^2 + C*G + G``     (depthwise k x k, then pointwise 1x1)
    """
    kind = CellKind(kind)
    g = 4 * hidden_channels
    return _gate_macs_per_pixel(kind, in_channels, hidden_channels, kernel) + g


def convlstm_flop_count(kind, in_channels: int, hidden_channels: int, kernel: int,
                        height: int, width: int, batch: int = 1, steps: int = 1) -> int:
    """2 x multiply-accumulates of the gate convolutions over all pixels and steps."""
    kind = CellKind(kind)
    return 2 * _gate_macs_per_pixel(kind, in_channels, hidden_channels, kernel) * height * width * batch * steps


class ConvLSTMCell(Module):
    """ConvLSTM without peepholes; gates ``(i, f, g, o)`` from one map over ``[x_t; h]``."""

    def __init__(self, kind, in_channels: int, hidden_channels: int, kernel: int = 3, dtype=np.float64):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"cell kernel must be odd and positive, got {kernel}")
        self.kind = CellKind(kind)
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel = kernel
        c, g, k = in_channels + hidden_channels, 4 * hidden_channels, kernel
        kind = self.kind
        if kind is CellKind.REGULAR:
            self.gates = Conv3d(ConvSpec.same(c, g, (1, k, k)), dtype=dtype)
            final = self.gates
        elif kind is CellKind.SPATIAL_SEPARABLE:
            self.vertical = Conv3d(ConvSpec.same(c, c, (1, k, 1)), bias=False, dtype=dtype)
            self.horizontal = Conv3d(ConvSpec.same(c, g, (1, 1, k)), dtype=dtype)
            final = self.horizontal
        elif kind is CellKind.DEPTHWISE_ONLY:
            self.multiplier = math.ceil(g / c)
            self.depthwise = Conv3d(ConvSpec.same(g, g, (1, k, k), groups=g), dtype=dtype)
            final = self.depthwise
        else:
            self.depthwise = Conv3d(ConvSpec.same(c, c, (1, k, k), groups=c), bias=False, dtype=dtype)
            self.pointwise = Conv3d(ConvSpec(c, g, (1, 1, 1)), dtype=dtype)
            final = self.pointwise
        final.bias.init = ("lstm_bias", hidden_channels)

    def _gate_preactivations(self, z: Tensor) -> Tensor:
        kind = self.kind
        if kind is CellKind.REGULAR:
            return self.gates(z)
        if kind is CellKind.SPATIAL_SEPARABLE:
            return self.horizontal(self.vertical(z))
        if kind is CellKind.DEPTHWISE_ONLY:
            g = 4 * self.hidden_channels
            rep = ops.repeat(z, self.multiplier, axis=1)
            if rep.shape[1] != g:
                rep = ops.slice_axis(rep, 1, 0, g)
            return self.depthwise(rep)
        return self.pointwise(self.depthwise(z))

    def initial_state(self, batch: int, height: int, width: int, dtype=None) -> ConvLstmState:
        dtype = dtype or self.parameters()[0].dtype
        shape = (batch, self.hidden_channels, height, width)
        return ConvLstmState(Tensor._wrap(np.zeros(shape, dtype)), Tensor._wrap(np.zeros(shape, dtype)))

    def step(self, x_t: Tensor, state: ConvLstmState) -> ConvLstmState:
        if x_t.ndim != 4 or x_t.shape[1] != self.in_channels:
            raise ShapeError(f"cell expects [B,{self.in_channels},H,W] input, got {x_t.shape}")
        if x_t.shape[0] != state.h.shape[0] or x_t.shape[2:] != state.h.shape[2:]:
            raise ShapeError(f"input {x_t.shape} does not match state {state.h.shape}")
        B, _, H, W = x_t.shape
        ch = self.hidden_channels
        z = ops.concat([x_t, state.h], axis=1)
        z = ops.reshape(z, (B, z.shape[1], 1, H, W))
        pre = ops.reshape(self._gate_preactivations(z), (B, 4 * ch, H, W))
        i = ops.sigmoid(ops.slice_axis(pre, 1, 0, ch))
        f = ops.sigmoid(ops.slice_axis(pre, 1, ch, 2 * ch))
        g = ops.tanh(ops.slice_axis(pre, 1, 2 * ch, 3 * ch))
        o = ops.sigmoid(ops.slice_axis(pre, 1, 3 * ch, 4 * ch))
        c = ops.add(ops.mul(f, state.c), ops.mul(i, g))
        h = ops.mul(o, ops.tanh(c))
        return ConvLstmState(h, c)

    def run(self, x_seq: Tensor, state: Optional[ConvLstmState] = None) -> tuple[Tensor, ConvLstmState]:
        """Unroll over the time axis of ``[B, C, T, H, W]``; returns ``[B, C_h, T, H, W]``."""
        B, _, T, H, W = x_seq.shape
        if state is None:
            state = self.initial_state(B, H, W, x_seq.dtype)
        hs = []
        for t in range(T):
            state = self.step(ops.select(x_seq, 2, t), state)
            hs.append(state.h)
        return ops.stack(hs, axis=2), state

    def param_count(self) -> int:
        return convlstm_param_count(self.kind, self.in_channels, self.hidden_channels, self.kernel)

    def flop_count(self, height: int, width: int, batch: int = 1, steps: int = 1) -> int:
        return convlstm_flop_count(self.kind, self.in_channels, self.hidden_channels, self.kernel,
                                   height, width, batch, steps)


class EncoderBlock(Module):
    """Block-1 / Block-2: two unstrided 3D convs, each with BN, plus a shortcut.

    ``y = act(BN(conv2(act(BN(conv1(x))))) + shortcut(x))``.  Block-1 projects
    the shortcut with a 1x1x1 conv, Block-2 passes it through unchanged.  With
    ``residual=False`` the shortcut is dropped and the activation simply
    follows the second normalization.
    """

    def __init__(self, block: BlockId, cin: int, cout: int, kernel: tuple, temporal_dilation: int = 1,
                 residual: bool = True, slope: float = 0.01, dtype=np.float64):
        block = BlockId(block)
        if block not in (BlockId.BLOCK1, BlockId.BLOCK2):
            raise ValueError(f"{block} is a decoder block")
        if block is BlockId.BLOCK2 and cin != cout:
            raise ValueError(f"Block-2 has an identity shortcut; needs C_in == C_out, got {cin} -> {cout}")
        self.block = block
        dil = (temporal_dilation, 1, 1)
        self.conv1 = Conv3d(ConvSpec.same(cin, cout, kernel, dil), bias=False, dtype=dtype)
        self.bn1 = BatchNorm(cout, dtype=dtype)
        self.conv2 = Conv3d(ConvSpec.same(cout, cout, kernel, dil), bias=False, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype=dtype)
        self.residual = residual
        self.shortcut = pointwise(cin, cout, dtype=dtype) if residual and block is BlockId.BLOCK1 else None
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        y = self.bn2(self.conv2(y))
        if self.residual:
            y = ops.add(y, self.shortcut(x) if self.shortcut is not None else x)
        return ops.leaky_relu(y, self.slope)


class DecoderBlock(Module):
    """Block-3 / Block-4: two stacked ConvLSTMs with a shortcut, per time step.

    ``y_t = cell2(cell1(x_t)) + shortcut(x_t)``; no activation after the add.
    Block-3 projects the shortcut, Block-4 uses identity.  States start at
    zero for every call.  ``temporal_kernel > 1`` feeds the first cell the
    last ``k`` input frames stacked along channels.
    """

    def __init__(self, block: BlockId, cin: int, cout: int, kind, kernel: int = 3,
                 temporal_kernel: int = 1, residual: bool = True, dtype=np.float64):
        block = BlockId(block)
        if block not in (BlockId.BLOCK3, BlockId.BLOCK4):
            raise ValueError(f"{block} is an encoder block")
        if block is BlockId.BLOCK4 and cin != cout:
            raise ValueError(f"Block-4 has an identity shortcut; needs C_in == C_out, got {cin} -> {cout}")
        self.block = block
        self.temporal_kernel = temporal_kernel
        self.cell1 = ConvLSTMCell(kind, cin * temporal_kernel, cout, kernel, dtype)
        self.cell2 = ConvLSTMCell(kind, cout, cout, kernel, dtype)
        self.residual = residual
        self.shortcut = pointwise(cin, cout, dtype=dtype) if residual and block is BlockId.BLOCK3 else None

    def __call__(self, x: Tensor) -> Tensor:
        h1, _ = self.cell1.run(temporal_window(x, self.temporal_kernel))
        h2, _ = self.cell2.run(h1)
        if not self.residual:
            return h2
        return ops.add(h2, self.shortcut(x) if self.shortcut is not None else x)


def residual_block_forward(block: EncoderBlock | DecoderBlock, x: Tensor) -> Tensor:
    return block(x)


class Upsample(Module):
    """Doubles H and W: learnable transposed conv (1,4,4)/(1,2,2)/(0,1,1) or nearest replication."""

    def __init__(self, channels: int, mode: str = "deconv", dtype=np.float64):
        if mode not in ("deconv", "interp"):
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.mode = mode
        self.deconv = None
        if mode == "deconv":
            spec = ConvSpec(channels, channels, (1, 4, 4), (1, 2, 2), (1, 1, 1), (0, 1, 1))
            self.deconv = ConvTranspose3d(spec, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.deconv is not None:
            return self.deconv(x)
        return upsample_nearest(x, (1, 2, 2))


def upsample_layer(mode: str, x: Tensor, layer: Optional[Upsample] = None) -> Tensor:
    if layer is None:
        layer = Upsample(x.shape[1], mode, x.dtype).initialize(0)
    return layer(x)


__all__ = [
    "BatchNorm", "BlockId", "CellKind", "ConvLSTMCell", "ConvLstmState", "DecoderBlock",
    "EncoderBlock", "Parameter", "Upsample", "convlstm_flop_count", "convlstm_param_count",
    "residual_block_forward", "upsample_layer",
]
