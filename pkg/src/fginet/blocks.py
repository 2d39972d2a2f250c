"""Convolutional building blocks: MBConv with squeeze-excite, CBAM attention
maps and the residual CBAM block that closes the backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import functional as F
from .core.nn import BatchNorm2d, Conv2d, Linear, Module
from .core.tensor import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class MBConvSpec:
    in_ch: int
    out_ch: int
    expansion: int = 6
    kernel: int = 3
    stride: int = 1
    se_ratio: float = 0.25

    @property
    def expanded(self) -> int:
        return self.in_ch * self.expansion

    @property
    def se_channels(self) -> int:
        # squeeze width follows the block input, not the expanded width
        return max(1, int(round(self.in_ch * self.se_ratio)))

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch

    def validate(self) -> None:
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigError(f"MBConv channels must be positive: {self}")
        if self.expansion < 1:
            raise ConfigError(f"MBConv expansion must be >= 1: {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"MBConv kernel must be a positive odd size: {self}")
        if self.stride not in (1, 2):
            raise ConfigError(f"MBConv stride must be 1 or 2: {self}")
        if not 0 < self.se_ratio <= 1:
            raise ConfigError(f"MBConv se_ratio must lie in (0, 1]: {self}")


class SqueezeExcite(Module):
    """Channel gate: global average pool -> reduce -> SiLU -> expand -> sigmoid."""

    def __init__(self, channels: int, reduced: int, rng: np.random.Generator):
        super().__init__()
        if reduced < 1:
            raise ConfigError(f"squeeze-excite needs at least one reduced channel, got {reduced}")
        self.reduce = Linear(channels, reduced, rng)
        self.expand = Linear(reduced, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        gate = F.sigmoid(self.expand(F.silu(self.reduce(x.mean(axis=(2, 3))))))
        return x * gate.reshape(N, C, 1, 1)


class MBConv(Module):
    """Inverted bottleneck: [1x1 expand] -> depthwise kxk -> SE -> 1x1 project [+ skip]."""

    def __init__(self, spec: MBConvSpec, rng: np.random.Generator):
        super().__init__()
        spec.validate()
        self.spec = spec
        mid = spec.expanded
        if spec.expansion != 1:
            self.expand_conv = Conv2d(spec.in_ch, mid, 1, rng, bias=False)
            self.expand_bn = BatchNorm2d(mid)
        self.dwconv = Conv2d(mid, mid, spec.kernel, rng, stride=spec.stride,
                             padding=spec.kernel // 2, groups=mid, bias=False)
        self.dw_bn = BatchNorm2d(mid)
        self.se = SqueezeExcite(mid, spec.se_channels, rng)
        self.project_conv = Conv2d(mid, spec.out_ch, 1, rng, bias=False)
        self.project_bn = BatchNorm2d(spec.out_ch)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_ch:
            raise ConfigError(f"MBConv expects {self.spec.in_ch} input channels, got {x.shape}")
        h = x
        if self.spec.expansion != 1:
            h = F.silu(self.expand_bn(self.expand_conv(h)))
        h = F.silu(self.dw_bn(self.dwconv(h)))
        h = self.project_bn(self.project_conv(self.se(h)))
        return h + x if self.spec.has_skip else h


class SpatialAttention(Module):
    """sigmoid(conv7x7([channel mean; channel max])) -> [N, 1, H, W]."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.sigmoid(self.conv(F.channel_pool(x)))


class ChannelAttention(Module):
    """sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))) -> [N, C, 1, 1], MLP shared."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16,
                 min_hidden: int = 8):
        super().__init__()
        hidden = max(channels // reduction, min_hidden)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        avg = x.mean(axis=(2, 3))
        mx = x.max(axis=(2, 3))
        return F.sigmoid(self.mlp(avg) + self.mlp(mx)).reshape(N, C, 1, 1)


class DepthwiseSeparable(Module):
    """Depthwise 3x3 followed by pointwise 1x1, both with bias, channel preserving."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        self.depthwise = Conv2d(channels, channels, kernel, rng, padding=kernel // 2,
                                groups=channels, bias=True)
        self.pointwise = Conv2d(channels, channels, 1, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class ResCBAM(Module):
    """Residual CBAM.

    ``F' = dwsep_b(x)``, ``F'' = M_c(F') * F'``, ``F''' = M_s(F'') * F''`` and the
    output is ``dwsep_a(x) + F'''``. ``residual=False`` drops the
    ``dwsep_a`` branch; ``enabled=False`` turns the whole block into the
    identity and allocates no parameters.
    """

    def __init__(self, channels: int, rng: np.random.Generator, enabled: bool = True,
                 residual: bool = True, reduction: int = 16, min_hidden: int = 8):
        super().__init__()
        self.channels = channels
        self.enabled = enabled
        self.residual = residual and enabled
        if not enabled:
            return
        if self.residual:
            self.res_branch = DepthwiseSeparable(channels, rng)
        self.branch = DepthwiseSeparable(channels, rng)
        self.channel_attention = ChannelAttention(channels, rng, reduction, min_hidden)
        self.spatial_attention = SpatialAttention(rng)

    def forward(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ConfigError(f"ResCBAM expects {self.channels} channels, got {x.shape}")
        f1 = self.branch(x)
        f2 = f1 * self.channel_attention(f1)
        f3 = f2 * self.spatial_attention(f2)
        return self.res_branch(x) + f3 if self.residual else f3
