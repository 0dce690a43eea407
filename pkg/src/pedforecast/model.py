"""Encoder/decoder frame predictor with lateral connections and a crossing-action head."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ConvSpec, Tensor, avg_pool, no_grad, ops
from .layers import BlockId, CellKind, DecoderBlock, EncoderBlock, Upsample, convlstm_param_count
from .nn import Conv3d, ConvBNAct, Linear, Module, maybe_trace, pointwise


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Full architectural description; every ablation variant is one of these.

    The encoder has four resolution levels (full, /2, /4, /8).
    ``spatial_kernels`` gives the 3D-conv spatial kernel per level and
    ``dilations`` the temporal dilation of each stacked Block-2 at /8.
    ``decoder_channels`` are the outputs of the three decoder stages (/8, /4, /2),
    each followed by a x2 upsampling.
    """

    n_frames: int = 8
    input_channels: int = 1
    height: int = 32
    width: int = 48
    stem_channels: int = 4
    encoder_channels: tuple = (4, 8, 16, 64)
    decoder_channels: tuple = (16, 8, 4)
    spatial_kernels: tuple = (5, 3, 3, 3)
    temporal_kernel: int = 3
    dilations: tuple = (1, 2, 4)
    cell_variant: str = "depthwise_separable"
    cell_kernel: int = 3
    cell_temporal_kernel: int = 1
    decoder_blocks_per_stage: int = 1
    laterals: bool = True
    residuals: bool = True
    upsample_mode: str = "deconv"
    output_kernel: int = 3
    head_channels: tuple = (4, 8, 8, 16)
    head_kernel: int = 3
    leaky_slope: float = 0.01
    loss_weight: float = 0.5

    def __post_init__(self):
        for name in ("encoder_channels", "decoder_channels", "spatial_kernels", "dilations", "head_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "cell_variant", CellKind(self.cell_variant).value)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Best-effort full-scale preset (3 x 16 x 128 x 208); widths are a guess."""
        base = dict(n_frames=16, input_channels=3, height=128, width=208, stem_channels=16,
                    encoder_channels=(32, 64, 128, 256), decoder_channels=(128, 64, 32),
                    spatial_kernels=(11, 7, 5, 3), head_channels=(32, 64, 128, 256),
                    decoder_blocks_per_stage=2)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.n_frames < 1 or self.input_channels < 1:
            raise ConfigError("n_frames and input_channels must be positive")
        if len(self.encoder_channels) != 4 or len(self.spatial_kernels) != 4:
            raise ConfigError("encoder needs 4 channel widths and 4 spatial kernels (full, /2, /4, /8)")
        if len(self.decoder_channels) != 3:
            raise ConfigError("decoder needs 3 stage widths (/8, /4, /2)")
        widths = (self.stem_channels,) + self.encoder_channels + self.decoder_channels + self.head_channels
        if min(widths) < 1:
            raise ConfigError(f"inconsistent channel schedule: non-positive width in {widths}")
        if not self.head_channels:
            raise ConfigError("action head needs at least one conv layer")
        if any(a < b for a, b in zip(self.spatial_kernels, self.spatial_kernels[1:])):
            raise ConfigError(f"spatial kernels must be non-increasing, got {self.spatial_kernels}")
        if min(self.spatial_kernels) < 1 or self.temporal_kernel < 1:
            raise ConfigError("kernels must be positive")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if any(a > b for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilation schedule must be non-decreasing, got {self.dilations}")
        if self.cell_kernel % 2 == 0 or self.cell_kernel < 1:
            raise ConfigError(f"cell kernel must be odd, got {self.cell_kernel}")
        if self.output_kernel % 2 == 0:
            raise ConfigError(f"output kernel must be odd, got {self.output_kernel}")
        if self.cell_temporal_kernel < 1 or self.decoder_blocks_per_stage < 1:
            raise ConfigError("cell_temporal_kernel and decoder_blocks_per_stage must be >= 1")
        if self.upsample_mode not in ("deconv", "interp"):
            raise ConfigError(f"upsample_mode must be 'deconv' or 'interp', got {self.upsample_mode!r}")
        if self.loss_weight < 0:
            raise ConfigError("loss weight must be >= 0")
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"frame size {self.height}x{self.width} must be divisible by 8")


class VariantId(str, Enum):
    OURS = "ours"
    V1 = "v1"  # regular ConvLSTM
    V2 = "v2"  # spatially separable ConvLSTM
    V3 = "v3"  # depthwise-only ConvLSTM
    V4 = "v4"  # no laterals
    V5 = "v5"  # no residual shortcuts
    V6 = "v6"  # undilated
    V7 = "v7"  # interpolation instead of deconvolution


VARIANT_LABELS = {
    VariantId.OURS: "Ours",
    VariantId.V1: "V-1 (Reg-convLSTM)",
    VariantId.V2: "V-2 (Spatial-convLSTM)",
    VariantId.V3: "V-3 (Depth-convLSTM)",
    VariantId.V4: "V-4 (w/o laterals)",
    VariantId.V5: "V-5 (w/o residuals)",
    VariantId.V6: "V-6 (Undilated)",
    VariantId.V7: "V-7 (w/o Deconv)",
}


def build_variant(variant, base: ModelConfig) -> ModelConfig:
    v = VariantId(variant)
    replace = dataclasses.replace
    if v is VariantId.OURS:
        return base
    if v is VariantId.V1:
        return replace(base, cell_variant=CellKind.REGULAR.value)
    if v is VariantId.V2:
        return replace(base, cell_variant=CellKind.SPATIAL_SEPARABLE.value)
    if v is VariantId.V3:
        return replace(base, cell_variant=CellKind.DEPTHWISE_ONLY.value)
    if v is VariantId.V4:
        return replace(base, laterals=False)
    if v is VariantId.V5:
        return replace(base, residuals=False)
    if v is VariantId.V6:
        return replace(base, dilations=tuple(1 for _ in base.dilations))
    return replace(base, upsample_mode="interp")


# --- shape plan ----------------------------------------------------------

@dataclass
class LayerPlan:
    name: str
    out_shape: tuple
    macs: int
    params: int


@dataclass
class ShapePlan:
    """Per-layer output shapes, multiply-accumulates and parameter counts from closed forms."""

    layers: list = field(default_factory=list)
    pixels: int = 0  # P = H * W of an output frame

    @property
    def shapes(self) -> dict:
        return {l.name: l.out_shape for l in self.layers}

    @property
    def flops(self) -> int:
        return 2 * sum(l.macs for l in self.layers)

    @property
    def param_count(self) -> int:
        return sum(l.params for l in self.layers)

    def __getitem__(self, name: str) -> tuple:
        return self.shapes[name]


def _conv_cost(cin, cout, kernel, out_ext, batch, bias, bn=False, groups=1):
    k = int(np.prod(kernel))
    macs = batch * int(np.prod(out_ext)) * cout * (cin // groups) * k
    params = cout * (cin // groups) * k + (cout if bias else 0) + (2 * cout if bn else 0)
    return macs, params


def _head_pools(cfg: ModelConfig) -> list[bool]:
    """Pool (1,2,2) after every head conv except the last, while extents stay even."""
    h, w = cfg.height, cfg.width
    pools = []
    for i in range(len(cfg.head_channels)):
        ok = i < len(cfg.head_channels) - 1 and h % 2 == 0 and w % 2 == 0
        pools.append(ok)
        if ok:
            h, w = h // 2, w // 2
    return pools


def head_features(cfg: ModelConfig) -> int:
    """Width of the FC input: channels x frames x pooled columns."""
    w = cfg.width // 2 ** sum(_head_pools(cfg))
    return cfg.head_channels[-1] * cfg.n_frames * w


def shape_plan(cfg: ModelConfig, batch: int = 1) -> ShapePlan:
    cfg.validate()
    N, B = cfg.n_frames, batch
    kt = cfg.temporal_kernel
    ks = cfg.spatial_kernels
    c = cfg.encoder_channels
    plan = ShapePlan(pixels=cfg.height * cfg.width)
    add = plan.layers.append

    def conv_ext(cin, cout, kernel, ext, stride=(1, 1, 1), dil=(1, 1, 1)):
        return ConvSpec.same(cin, cout, kernel, dil, stride).output_extent(ext)

    ext = (N, cfg.height, cfg.width)
    k0 = (kt, ks[0], ks[0])
    out = conv_ext(cfg.input_channels, cfg.stem_channels, k0, ext)
    add(LayerPlan("encoder.stem", (B, cfg.stem_channels) + out,
                  *_conv_cost(cfg.input_channels, cfg.stem_channels, k0, out, B, False, True)))

    def enc_block(name, block, cin, cout, kernel, ext, dil=1):
        o = conv_ext(cin, cout, kernel, ext, dil=(dil, 1, 1))
        m1, p1 = _conv_cost(cin, cout, kernel, o, B, False, True)
        m2, p2 = _conv_cost(cout, cout, kernel, o, B, False, True)
        macs, params = m1 + m2, p1 + p2
        if cfg.residuals and block is BlockId.BLOCK1:
            m3, p3 = _conv_cost(cin, cout, (1, 1, 1), o, B, True)
            macs, params = macs + m3, params + p3
        add(LayerPlan(name, (B, cout) + o, macs, params))
        return o

    def down(name, cin, cout, kernel, ext):
        o = conv_ext(cin, cout, kernel, ext, stride=(1, 2, 2))
        add(LayerPlan(name, (B, cout) + o, *_conv_cost(cin, cout, kernel, o, B, False, True)))
        return o

    full = enc_block("encoder.block1_full", BlockId.BLOCK1, cfg.stem_channels, c[0], k0, out)
    k1, k2, k3 = ((kt, k, k) for k in ks[1:])
    e = down("encoder.down1", c[0], c[0], k1, full)
    half = enc_block("encoder.block1_half", BlockId.BLOCK1, c[0], c[1], k1, e)
    e = down("encoder.down2", c[1], c[2], k2, half)
    quarter = enc_block("encoder.block2_quarter", BlockId.BLOCK2, c[2], c[2], k2, e)
    e = down("encoder.down3", c[2], c[3], k3, quarter)
    for i, d in enumerate(cfg.dilations):
        e = enc_block(f"encoder.dilated.{i}", BlockId.BLOCK2, c[3], c[3], k3, e, d)
    if e[1] * 8 != cfg.height or e[2] * 8 != cfg.width or e[0] != N:
        raise ConfigError(f"bottleneck extent {e} is not input/8 with T={N}")

    lateral_src = [(c[2], quarter), (c[1], half), (c[0], full)]
    cin = c[3]
    ext = e
    for s, cout in enumerate(cfg.decoder_channels):
        T, H, W = ext
        n_px = B * T * H * W
        macs = params = 0
        for j in range(cfg.decoder_blocks_per_stage):
            bin_ = cin if j == 0 else cout
            cx = bin_ * (cfg.cell_temporal_kernel if j == 0 else 1)
            for (a, b) in ((cx, cout), (cout, cout)):
                p = convlstm_param_count(cfg.cell_variant, a, b, cfg.cell_kernel)
                params += p
                macs += (p - 4 * b) * n_px
            if cfg.residuals and bin_ != cout:
                macs += n_px * bin_ * cout
                params += bin_ * cout + cout
        add(LayerPlan(f"decoder.stage{s}", (B, cout) + ext, macs, params))
        up_ext = (T, 2 * H, 2 * W)
        if cfg.upsample_mode == "deconv":
            add(LayerPlan(f"decoder.up{s}", (B, cout) + up_ext, n_px * cout * cout * 16, cout * cout * 16 + cout))
        else:
            add(LayerPlan(f"decoder.up{s}", (B, cout) + up_ext, 0, 0))
        src_c, src_ext = lateral_src[s]
        if src_ext != up_ext:
            raise ConfigError(f"lateral {s}: encoder extent {src_ext} != decoder extent {up_ext}")
        if cfg.laterals:
            add(LayerPlan(f"decoder.lateral{s}", (B, cout) + up_ext,
                          *_conv_cost(src_c, cout, (1, 1, 1), up_ext, B, True)))
        cin, ext = cout, up_ext
    ko = (1, cfg.output_kernel, cfg.output_kernel)
    add(LayerPlan("decoder.output", (B, cfg.input_channels) + ext,
                  *_conv_cost(cin, cfg.input_channels, ko, ext, B, True)))

    hk = (cfg.head_kernel,) * 3
    hin = cfg.input_channels
    hext = (N, cfg.height, cfg.width)
    for i, (hc, pool) in enumerate(zip(cfg.head_channels, _head_pools(cfg))):
        m, p = _conv_cost(hin, hc, hk, hext, B, True)
        if pool:
            hext = (hext[0], hext[1] // 2, hext[2] // 2)
        add(LayerPlan(f"head.conv{i}", (B, hc) + hext, m, p))
        hin = hc
    nf = head_features(cfg)
    add(LayerPlan("head.fc", (B,), B * nf, nf + 1))
    return plan


# --- network -------------------------------------------------------------

class Encoder(Module):
    def __init__(self, cfg: ModelConfig, dtype):
        kt, ks, c, a = cfg.temporal_kernel, cfg.spatial_kernels, cfg.encoder_channels, cfg.leaky_slope
        k = [(kt, s, s) for s in ks]
        res = cfg.residuals
        self.stem = ConvBNAct(ConvSpec.same(cfg.input_channels, cfg.stem_channels, k[0]), a, dtype)
        self.block1_full = EncoderBlock(BlockId.BLOCK1, cfg.stem_channels, c[0], k[0], 1, res, a, dtype)
        self.down1 = ConvBNAct(ConvSpec.same(c[0], c[0], k[1], stride=(1, 2, 2)), a, dtype)
        self.block1_half = EncoderBlock(BlockId.BLOCK1, c[0], c[1], k[1], 1, res, a, dtype)
        self.down2 = ConvBNAct(ConvSpec.same(c[1], c[2], k[2], stride=(1, 2, 2)), a, dtype)
        self.block2_quarter = EncoderBlock(BlockId.BLOCK2, c[2], c[2], k[2], 1, res, a, dtype)
        self.down3 = ConvBNAct(ConvSpec.same(c[2], c[3], k[3], stride=(1, 2, 2)), a, dtype)
        self.dilated = [EncoderBlock(BlockId.BLOCK2, c[3], c[3], k[3], d, res, a, dtype) for d in cfg.dilations]

    def __call__(self, x: Tensor, trace: Optional[dict] = None) -> tuple[Tensor, list[Tensor]]:
        """Returns the bottleneck and the lateral features at /4, /2 and full size."""
        t = maybe_trace(trace, "encoder.stem", self.stem(x))
        full = maybe_trace(trace, "encoder.block1_full", self.block1_full(t))
        t = maybe_trace(trace, "encoder.down1", self.down1(full))
        half = maybe_trace(trace, "encoder.block1_half", self.block1_half(t))
        t = maybe_trace(trace, "encoder.down2", self.down2(half))
        quarter = maybe_trace(trace, "encoder.block2_quarter", self.block2_quarter(t))
        t = maybe_trace(trace, "encoder.down3", self.down3(quarter))
        for i, blk in enumerate(self.dilated):
            t = maybe_trace(trace, f"encoder.dilated.{i}", blk(t))
        return t, [quarter, half, full]


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, dtype):
        c = cfg.encoder_channels
        lateral_channels = [c[2], c[1], c[0]]
        cin = c[3]
        self.stages, self.ups, self.laterals = [], [], []
        for cout, lat in zip(cfg.decoder_channels, lateral_channels):
            blocks = []
            for j in range(cfg.decoder_blocks_per_stage):
                bin_ = cin if j == 0 else cout
                kind = BlockId.BLOCK3 if bin_ != cout else BlockId.BLOCK4
                blocks.append(DecoderBlock(kind, bin_, cout, cfg.cell_variant, cfg.cell_kernel,
                                           cfg.cell_temporal_kernel if j == 0 else 1, cfg.residuals, dtype))
            self.stages.append(_Stage(blocks))
            self.ups.append(Upsample(cout, cfg.upsample_mode, dtype))
            if cfg.laterals:
                self.laterals.append(pointwise(lat, cout, dtype=dtype))
            cin = cout
        ko = cfg.output_kernel
        self.output = Conv3d(ConvSpec.same(cin, cfg.input_channels, (1, ko, ko)), dtype=dtype)

    def __call__(self, z: Tensor, lateral_feats: list[Tensor], trace: Optional[dict] = None) -> Tensor:
        t = z
        for s, (stage, up) in enumerate(zip(self.stages, self.ups)):
            t = maybe_trace(trace, f"decoder.stage{s}", stage(t))
            t = maybe_trace(trace, f"decoder.up{s}", up(t))
            if self.laterals:
                lat = maybe_trace(trace, f"decoder.lateral{s}", self.laterals[s](lateral_feats[s]))
                t = ops.add(t, lat)
        return ops.sigmoid(maybe_trace(trace, "decoder.output", self.output(t)))


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class ActionHead(Module):
    """Small 3D-conv classifier over predicted frames.

    conv/pool stack, then a mean over rows only: the FC layer sees every
    (channel, frame, column) cell, so it can tell early frames from late
    ones and the road columns from the sidewalk.
    """

    def __init__(self, cfg: ModelConfig, dtype):
        k = cfg.head_kernel
        cin = cfg.input_channels
        self.convs = []
        for cout in cfg.head_channels:
            conv = Conv3d(ConvSpec.same(cin, cout, (k, k, k)), dtype=dtype)
            conv.weight.init = ("uniform", float(np.sqrt(6.0 / (cin * k ** 3))))  # He bound for leaky units
            self.convs.append(conv)
            cin = cout
        self.pools = _head_pools(cfg)
        self.fc = Linear(head_features(cfg), 1, dtype)
        self.slope = cfg.leaky_slope

    def __call__(self, frames: Tensor, trace: Optional[dict] = None) -> Tensor:
        t = frames
        for i, (conv, pool) in enumerate(zip(self.convs, self.pools)):
            t = ops.leaky_relu(conv(t), self.slope)
            if pool:
                t = avg_pool(t, (1, 2, 2))
            maybe_trace(trace, f"head.conv{i}", t)
        feats = ops.reshape(ops.mean(t, axes=3), (t.shape[0], -1))
        logit = maybe_trace(trace, "head.fc", ops.reshape(self.fc(feats), (t.shape[0],)))
        return ops.sigmoid(logit)


class PredictionModel(Module):
    """Frame predictor (encoder + decoder) feeding the action head."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, seed: int = 0):
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(cfg, self.dtype)
        self.decoder = Decoder(cfg, self.dtype)
        self.head = ActionHead(cfg, self.dtype)
        self.initialize(seed)

    def predictor_parameters(self) -> list:
        return self.encoder.parameters() + self.decoder.parameters()

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.dtype != self.dtype:
                return Tensor._wrap(x.data.astype(self.dtype))
            return x
        return Tensor._wrap(np.asarray(x, dtype=self.dtype))

    def _check(self, x: Tensor) -> None:
        cfg = self.config
        want = (cfg.input_channels, cfg.n_frames, cfg.height, cfg.width)
        if x.ndim != 5 or tuple(x.shape[1:]) != want:
            raise ValueError(f"input shape {x.shape} does not match planned [B, {', '.join(map(str, want))}]")

    def predict_frames(self, x, trace: Optional[dict] = None) -> Tensor:
        x = self._as_input(x)
        self._check(x)
        z, lats = self.encoder(x, trace)
        return self.decoder(z, lats, trace)

    def action_forward(self, frames, trace: Optional[dict] = None) -> Tensor:
        frames = self._as_input(frames)
        self._check(frames)
        return self.head(frames, trace)

    def shape_plan(self, batch: int = 1) -> ShapePlan:
        return shape_plan(self.config, batch)

    def flop_count(self) -> int:
        return shape_plan(self.config, 1).flops


def build_model(cfg: ModelConfig, dtype=np.float32, seed: int = 0) -> PredictionModel:
    return PredictionModel(cfg, dtype, seed)


def predict_frames(model: PredictionModel, x) -> Tensor:
    return model.predict_frames(x)


def action_forward(model: PredictionModel, frames) -> Tensor:
    return model.action_forward(frames)


def bottleneck_features(model: PredictionModel, x) -> Tensor:
    with no_grad():
        z, _ = model.encoder(model._as_input(x))
    return z


# --- checkpoints ---------------------------------------------------------

def save_checkpoint(model: PredictionModel, directory, extra: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    record = {"model": model.config.to_dict(), "dtype": model.dtype.name}
    if extra:
        record.update(extra)
    (d / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    model.save(d / "params.bin")
    return d


def load_checkpoint(directory) -> tuple[PredictionModel, dict]:
    d = Path(directory)
    record = json.loads((d / "config.json").read_text())
    cfg = ModelConfig.from_dict(record["model"])
    model = PredictionModel(cfg, dtype=np.dtype(record.get("dtype", "float32")))
    model.load(d / "params.bin")
    return model, record
