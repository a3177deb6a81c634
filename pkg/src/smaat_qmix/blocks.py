"""Architecture building blocks: separable convolutions, MixConv, CBAM.

A tiny ``Module`` registry keeps named parameters (and BatchNorm running
statistics) in deterministic order so models can be counted, checkpointed
and diffed by name.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Base class: children and parameters are discovered by attribute order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, Tensor) and not name.startswith("_"):
            self.__dict__.setdefault("_params", {})[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int) -> Tensor:
    """Fan-in scaled normal init for a conv weight."""
    fan_in = c_in_per_group * k * k
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(c_out, c_in_per_group, k, k))
    return Tensor(w.astype(T.get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel, stride=1, padding=0,
                 groups=1, bias=True):
        super().__init__()
        if in_channels % groups:
            raise ShapeError(f"groups={groups} must divide in_channels={in_channels}")
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = kaiming_conv(rng, out_channels, in_channels // groups, kernel)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=T.get_default_dtype()),
                               requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by batch statistics (differentiating through
    them) and updates the running estimates; eval mode treats the running
    estimates as constants.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int):
        super().__init__()
        dt = T.get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        C = x.shape[1]
        if C != self.gamma.size:
            raise ShapeError(f"batchnorm expects {self.gamma.size} channels, got {C}")
        if self.training:
            mean = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = T.tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
            m = mean.data.reshape(-1)
            v = var.data.reshape(-1)
            self.running_mean += self.MOMENTUM * (m - self.running_mean)
            self.running_var += self.MOMENTUM * (v - self.running_var)
            xhat = centered / T.sqrt(var + self.EPS)
        else:
            rm = self.running_mean.reshape(1, C, 1, 1)
            rv = self.running_var.reshape(1, C, 1, 1)
            xhat = (x - Tensor(rm)) / T.sqrt(Tensor(rv) + self.EPS)
        g = T.reshape(self.gamma, (1, C, 1, 1))
        b = T.reshape(self.beta, (1, C, 1, 1))
        return xhat * g + b


class DepthwiseSeparable(Module):
    """Depthwise 3x3 (channel multiplier m) then pointwise 1x1 projection."""

    def __init__(self, rng, in_channels, out_channels, multiplier=2):
        super().__init__()
        self.depthwise = Conv2d(rng, in_channels, in_channels * multiplier, 3,
                                padding=1, groups=in_channels)
        self.pointwise = Conv2d(rng, in_channels * multiplier, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class DoubleDSC(Module):
    """Two stages of depthwise-separable conv + BatchNorm + ReLU."""

    def __init__(self, rng, in_channels, out_channels, multiplier=2, mid_channels=None):
        super().__init__()
        mid = mid_channels or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = DepthwiseSeparable(rng, in_channels, mid, multiplier)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = DepthwiseSeparable(rng, mid, out_channels, multiplier)
        self.bn2 = BatchNorm2d(out_channels)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"DoubleDSC expects {self.in_channels} channels, got {x.shape[1]}"
            )
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class MixConvStage(Module):
    """Split channels in two halves, 3x3 depthwise on the first, 5x5 on the
    second, concat, shared 1x1 pointwise, then BN + ReLU."""

    def __init__(self, rng, in_channels, out_channels):
        super().__init__()
        if in_channels % 2:
            raise ConfigError(
                f"MixConv needs an even channel count, got {in_channels}"
            )
        half = in_channels // 2
        self.in_channels = in_channels
        self.dw3 = Conv2d(rng, half, half, 3, padding=1, groups=half)
        self.dw5 = Conv2d(rng, half, half, 5, padding=2, groups=half)
        self.pointwise = Conv2d(rng, in_channels, out_channels, 1)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x):
        half = self.in_channels // 2
        lo, hi = _split_channels(x, half)
        mixed = T.concat_channels(self.dw3(lo), self.dw5(hi))
        return T.relu(self.bn(self.pointwise(mixed)))


def _split_channels(x: Tensor, half: int):
    """Differentiable split of a rank-4 tensor into [:half] and [half:]."""
    lo_data = np.ascontiguousarray(x.data[:, :half])
    hi_data = np.ascontiguousarray(x.data[:, half:])

    def bw_lo(g):
        gx = np.zeros_like(x.data)
        gx[:, :half] = g
        return (gx,)

    def bw_hi(g):
        gx = np.zeros_like(x.data)
        gx[:, half:] = g
        return (gx,)

    return T._node(lo_data, (x,), bw_lo), T._node(hi_data, (x,), bw_hi)


class DoubleMixConv(Module):
    """Two MixConv stages mirroring the DoubleDSC layout."""

    def __init__(self, rng, in_channels, out_channels, mid_channels=None):
        super().__init__()
        mid = mid_channels or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stage1 = MixConvStage(rng, in_channels, mid)
        self.stage2 = MixConvStage(rng, mid, out_channels)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"DoubleMixConv expects {self.in_channels} channels, got {x.shape[1]}"
            )
        return self.stage2(self.stage1(x))


class ChannelAttention(Module):
    def __init__(self, rng, channels, ratio=16):
        super().__init__()
        if channels % ratio:
            raise ConfigError(
                f"channels={channels} not divisible by reduction ratio {ratio}"
            )
        self.fc1 = Conv2d(rng, channels, channels // ratio, 1, bias=False)
        self.fc2 = Conv2d(rng, channels // ratio, channels, 1, bias=False)

    def _mlp(self, desc):
        return self.fc2(T.relu(self.fc1(desc)))

    def forward(self, x):
        avg = T.tmean(x, axis=(2, 3), keepdims=True)
        mx = T.amax(T.amax(x, axis=3, keepdims=True), axis=2, keepdims=True)
        return T.sigmoid(self._mlp(avg) + self._mlp(mx))


class SpatialAttention(Module):
    def __init__(self, rng, kernel=7):
        super().__init__()
        self.conv = Conv2d(rng, 2, 1, kernel, padding=(kernel - 1) // 2, bias=False)

    def forward(self, x):
        avg = T.tmean(x, axis=1, keepdims=True)
        mx = T.amax(x, axis=1, keepdims=True)
        return T.sigmoid(self.conv(T.concat_channels(avg, mx)))


class CBAM(Module):
    """Channel-then-spatial attention gate; both gates lie in (0, 1)."""

    def __init__(self, rng, channels, ratio=16, spatial_kernel=7):
        super().__init__()
        self.channel = ChannelAttention(rng, channels, ratio)
        self.spatial = SpatialAttention(rng, spatial_kernel)

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)
