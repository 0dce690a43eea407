"""Parameter containers and the generic layers the network is made of."""
from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from .autodiff import ConvSpec, RunningStats, Tensor, batch_norm, conv3d, conv_transpose3d
from .autodiff import io as tio
from .autodiff import ops


class Parameter(Tensor):
    """A learnable leaf tensor that knows how to (re)initialize itself.

    ``init`` is ``("uniform", bound)``, ``("const", value)`` or
    ``("lstm_bias", hidden)`` (zeros with the forget-gate slice set to 1).
    """

    def __init__(self, shape, init=("const", 0.0), dtype=np.float64):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init

    def reset(self, rng: np.random.Generator) -> None:
        kind, arg = self.init
        if kind == "uniform":
            vals = rng.uniform(-arg, arg, size=self.shape)
        elif kind == "const":
            vals = np.full(self.shape, arg)
        elif kind == "lstm_bias":
            vals = np.zeros(self.shape)
            vals[arg:2 * arg] = 1.0
        else:
            raise ValueError(f"unknown init rule {kind!r}")
        self.data[...] = vals.astype(self.dtype)
        self.grad = None


def param_seed(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name): same names draw the same values."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class Module:
    """Attribute-walking parameter holder in the spirit of small autograd libraries."""

    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield prefix + name, val
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def initialize(self, seed: int) -> "Module":
        for name, p in self.named_parameters():
            p.reset(param_seed(seed, name))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, st in self.named_buffers():
            out[name + ".running_mean"] = np.asarray(st.mean, dtype=np.float64).copy()
            out[name + ".running_var"] = np.asarray(st.var, dtype=np.float64).copy()
            out[name + ".initialized"] = np.array([float(st.initialized)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{b}.{s}" for b in buffers for s in ("running_mean", "running_var", "initialized")}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
        for name, st in buffers.items():
            st.mean = state[name + ".running_mean"].astype(np.float64).copy()
            st.var = state[name + ".running_var"].astype(np.float64).copy()
            st.initialized = bool(state[name + ".initialized"][0])

    def save(self, path) -> None:
        tio.save_named(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(tio.load_named(path))


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, bias: bool = True, dtype=np.float64):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_volume
        self.weight = Parameter(spec.weight_shape(), ("uniform", float(np.sqrt(1.0 / fan_in))), dtype)
        self.bias = Parameter((spec.out_channels,), ("const", 0.0), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)


class ConvTranspose3d(Module):
    def __init__(self, spec: ConvSpec, bias: bool = True, dtype=np.float64):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_volume
        self.weight = Parameter(spec.transpose_weight_shape(), ("uniform", float(np.sqrt(1.0 / fan_in))), dtype)
        self.bias = Parameter((spec.out_channels,), ("const", 0.0), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, self.bias, self.spec)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.gamma = Parameter((channels,), ("const", 1.0), dtype)
        self.beta = Parameter((channels,), ("const", 0.0), dtype)
        self.stats = RunningStats(channels, momentum=momentum)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, dtype=np.float64):
        bound = float(np.sqrt(1.0 / in_features))
        self.weight = Parameter((out_features, in_features), ("uniform", bound), dtype)
        self.bias = Parameter((out_features,), ("const", 0.0), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """conv3d (no bias) -> batch norm -> Leaky-ReLU."""

    def __init__(self, spec: ConvSpec, slope: float = 0.01, dtype=np.float64):
        self.conv = Conv3d(spec, bias=False, dtype=dtype)
        self.bn = BatchNorm(spec.out_channels, dtype=dtype)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.bn(self.conv(x)), self.slope)


def pointwise(cin: int, cout: int, bias: bool = True, dtype=np.float64) -> Conv3d:
    return Conv3d(ConvSpec(cin, cout, (1, 1, 1)), bias=bias, dtype=dtype)


def temporal_window(x: Tensor, k: int) -> Tensor:
    """Stack the ``k`` most recent frames (zero-filled before t=0) along channels."""
    if k == 1:
        return x
    B, C, T, H, W = x.shape
    zeros = Tensor._wrap(np.zeros((B, C, k - 1, H, W), dtype=x.dtype))
    padded = ops.concat([zeros, x], axis=2)
    return ops.concat([ops.slice_axis(padded, 2, j, j + T) for j in range(k)], axis=1)


def maybe_trace(trace: Optional[dict], name: str, t: Tensor) -> Tensor:
    if trace is not None:
        trace[name] = t.shape
    return t
