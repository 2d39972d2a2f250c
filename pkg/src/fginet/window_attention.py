"""Shifted-window multi-head self-attention (W-MSA / SW-MSA).

Feature maps are split into non-overlapping ``window x window`` patches and
self-attention runs inside each patch. A second block cyclically shifts
the map by half a window first, so information crosses the previous
block's window borders; an additive mask stops tokens that only became
neighbours through the wrap-around from attending to each other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .core import functional as F
from .core.nn import Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .core.tensor import Tensor
from .errors import ConfigError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowAttnConfig:
    dim: int
    heads: int
    window: int = 7
    shift: int = 0
    mlp_ratio: float = 2.0
    use_relative_bias: bool = True

    def validate(self) -> None:
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"attention dim {self.dim} must be divisible by heads {self.heads}")
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift {self.shift} must satisfy 0 <= shift < window {self.window}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")


# ------------------------------------------------------------ pure rearrangers

def _check_divisible(H: int, W: int, window: int) -> None:
    if H % window or W % window:
        raise ConfigError(f"feature map {H}x{W} is not divisible by window {window}; pad it first")


def _partition_nhwc(x: Tensor, window: int) -> Tensor:
    N, H, W, C = x.shape
    _check_divisible(H, W, window)
    nh, nw = H // window, W // window
    x = x.reshape(N, nh, window, nw, window, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N * nh * nw, window * window, C)


def _reverse_nhwc(windows: Tensor, window: int, H: int, W: int) -> Tensor:
    nh, nw = H // window, W // window
    C = windows.shape[-1]
    N = windows.shape[0] // (nh * nw)
    x = windows.reshape(N, nh, nw, window, window, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, H, W, C)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[N, C, H, W] -> [N * (H/window) * (W/window), window**2, C]."""
    return _partition_nhwc(x.transpose(0, 2, 3, 1), window)


def window_reverse(windows: Tensor, window: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`, back to [N, C, H, W]."""
    _check_divisible(H, W, window)
    return _reverse_nhwc(windows, window, H, W).transpose(0, 3, 1, 2)


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the spatial axes of an NCHW map."""
    return F.roll(x, (dy, dx), (2, 3))


@lru_cache(maxsize=64)
def _mask_cached(H: int, W: int, window: int, shift: int) -> np.ndarray:
    _check_divisible(H, W, window)
    nW = (H // window) * (W // window)
    T = window * window
    if shift == 0:
        return np.zeros((nW, T, T), dtype=np.float64)
    labels = np.zeros((H, W), dtype=np.int64)
    region = 0
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    lw = labels.reshape(H // window, window, W // window, window).transpose(0, 2, 1, 3).reshape(nW, T)
    return np.where(lw[:, :, None] != lw[:, None, :], MASK_VALUE, 0.0)


def shifted_window_mask(H: int, W: int, window: int, shift: int) -> np.ndarray:
    """Additive mask ``[num_windows, window**2, window**2]`` for a map rolled by ``-shift``.

    Entry ``(w, i, j)`` is ``MASK_VALUE`` when tokens ``i`` and ``j`` of window
    ``w`` come from different sides of the wrap seam, else 0.
    """
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} must satisfy 0 <= shift < window {window}")
    return _mask_cached(H, W, window, shift).copy()


def relative_position_index(window: int) -> np.ndarray:
    """Index into the ``(2w-1)**2`` bias table for each token pair, [w**2, w**2]."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def padded_extent(n: int, window: int) -> int:
    return int(math.ceil(n / window)) * window


# --------------------------------------------------------------------- modules

class WindowMSA(Module):
    """Multi-head self-attention restricted to (optionally shifted) windows.

    Input and output are NCHW with identical shape. Maps whose sides are
    not multiples of the window are zero-padded symmetrically and cropped
    back afterwards. When the padded map fits in a single window the shift
    is dropped, since there is no border left to cross.
    """

    def __init__(self, cfg: WindowAttnConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.dim
        self.qkv = Linear(C, 3 * C, rng, init="trunc_normal")
        self.proj = Linear(C, C, rng, init="trunc_normal")
        if cfg.use_relative_bias:
            n = 2 * cfg.window - 1
            self.relative_position_bias_table = Parameter(trunc_normal(rng, (n * n, cfg.heads)))
            self._rel_index = relative_position_index(cfg.window).reshape(-1)
        self.scale = (C // cfg.heads) ** -0.5
        self.keep_attention = False
        self.last_attention = None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.dim:
            raise ConfigError(f"WindowMSA(dim={self.cfg.dim}) got input {x.shape}")
        return self.forward_nhwc(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)

    def effective_shift(self, Hp: int, Wp: int) -> int:
        w = self.cfg.window
        return 0 if (Hp <= w and Wp <= w) else self.cfg.shift

    def forward_nhwc(self, x: Tensor) -> Tensor:
        N, H, W, C = x.shape
        w = self.cfg.window
        Hp, Wp = padded_extent(H, w), padded_extent(W, w)
        top, left = (Hp - H) // 2, (Wp - W) // 2
        x = F.pad(x, ((0, 0), (top, Hp - H - top), (left, Wp - W - left), (0, 0)))
        shift = self.effective_shift(Hp, Wp)
        if shift:
            x = F.roll(x, (-shift, -shift), (1, 2))
        windows = _partition_nhwc(x, w)
        mask = _mask_cached(Hp, Wp, w, shift) if shift else None
        out = _reverse_nhwc(self.attend(windows, mask), w, Hp, Wp)
        if shift:
            out = F.roll(out, (shift, shift), (1, 2))
        if Hp != H or Wp != W:
            out = out[:, top:top + H, left:left + W, :]
        return out

    def relative_bias(self) -> Tensor:
        T = self.cfg.window ** 2
        table = self.relative_position_bias_table[self._rel_index]
        return table.reshape(T, T, self.cfg.heads).transpose(2, 0, 1)

    def attend(self, tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Scaled dot-product attention over ``[B, T, C]`` window tokens."""
        B, T, C = tokens.shape
        h = self.cfg.heads
        qkv = self.qkv(tokens).reshape(B, T, 3, h, C // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        scores = q @ k.transpose(0, 1, 3, 2)
        if self.cfg.use_relative_bias:
            scores = scores + self.relative_bias()
        if mask is not None:
            nW = mask.shape[0]
            m = Tensor(mask[None, :, None].astype(scores.dtype))
            scores = (scores.reshape(B // nW, nW, h, T, T) + m).reshape(B, h, T, T)
        attn = F.softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, C)
        return self.proj(out)


class WindowAttentionBlock(Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: WindowAttnConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        hidden = int(round(cfg.dim * cfg.mlp_ratio))
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = WindowMSA(cfg, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, hidden, rng, init="trunc_normal")
        self.fc2 = Linear(hidden, cfg.dim, rng, init="trunc_normal")

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_nhwc(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)

    def forward_nhwc(self, x: Tensor) -> Tensor:
        x = x + self.attn.forward_nhwc(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class GlobalInteraction(Module):
    """Alternating W-MSA / SW-MSA blocks over an NCHW feature map.

    ``cfg.shift`` is the displacement used by the shifted blocks; a zero
    shift in the config falls back to half a window.
    """

    def __init__(self, cfg: WindowAttnConfig, rng: np.random.Generator, depth: int = 2):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"attention depth must be >= 1, got {depth}")
        shifted = cfg.shift or cfg.window // 2
        self.blocks = ModuleList(
            WindowAttentionBlock(replace(cfg, shift=0 if i % 2 == 0 else shifted), rng)
            for i in range(depth))

    def forward(self, x: Tensor) -> Tensor:
        t = x.transpose(0, 2, 3, 1)
        for blk in self.blocks:
            t = blk.forward_nhwc(t)
        return t.transpose(0, 3, 1, 2)


class ReduceDownsample(Module):
    """Channel reduction with 2x spatial downsampling: 2x2 stride-2 conv + LayerNorm."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv = Conv2d(in_ch, out_ch, 2, rng, stride=2, bias=True)
        self.norm = LayerNorm(out_ch, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch or x.shape[2] < 2 or x.shape[3] < 2:
            raise ConfigError(
                f"reduce_and_downsample expects [N, {self.in_ch}, H>=2, W>=2], got {x.shape}")
        return self.norm(self.conv(x))
