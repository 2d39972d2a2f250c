"""FGI-Net assembly, parameter/MAC accounting, ablations and checkpoints.

Topology for a 224x224 input::

    stem 3x3/2 -> 32ch @112
    stage1: MBConv e1 k3 32->16, 2x MBConv e6 k3 ->24 (first /2), attention @56
    stage2: 2x MBConv e6 k5 ->40 (first /2), attention @28
    stage3: 3x MBConv e6 k3 ->80 (first /2), 3x MBConv e6 k5 ->112, attention @14
    reduce 2x2/2 112->96 @7 -> global attention @7 -> Res_CBAM
    global average pool -> 96->32 -> ReLU -> 32->3
"""
from __future__ import annotations

import dataclasses
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import config_io
from .blocks import MBConv, MBConvSpec, ResCBAM
from .core import functional as F
from .core.counting import MacCounter
from .core.nn import BatchNorm2d, Conv2d, Dropout, Linear, Module
from .core.tensor import DEFAULT_DTYPE, Tensor, no_grad
from .errors import ConfigError, FormatError, NumericError, UsageError
from .window_attention import GlobalInteraction, ReduceDownsample, WindowAttnConfig

ABLATIONS = ("residual", "res_cbam")


@dataclass(frozen=True)
class StageConfig:
    blocks: tuple
    attn: WindowAttnConfig
    attn_depth: int = 2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of an FGI-Net instance; see :func:`reference_config`."""

    stages: tuple
    final_attn: WindowAttnConfig
    input_size: tuple = (224, 224)
    in_channels: int = 3
    stem_channels: int = 32
    stem_stride: int = 2
    reduce_channels: int = 96
    final_attn_depth: int = 2
    head_hidden: int = 32
    out_dim: int = 3
    cbam_reduction: int = 16
    cbam_min_hidden: int = 8
    dropout_rates: tuple = (0.0, 0.0, 0.0)
    residual_off: bool = False
    res_cbam_off: bool = False

    def validate(self) -> None:
        if len(self.input_size) != 2 or min(self.input_size) < 32:
            raise ConfigError(f"input_size must be two extents >= 32, got {self.input_size}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if len(self.dropout_rates) != len(self.stages):
            raise ConfigError(f"dropout_rates needs one rate per stage ({len(self.stages)}), "
                              f"got {self.dropout_rates}")
        for r in self.dropout_rates:
            if not 0 <= r < 1:
                raise ConfigError(f"dropout rate {r} outside [0, 1)")
        ch = self.stem_channels
        stride = self.stem_stride
        for si, stage in enumerate(self.stages, 1):
            if not stage.blocks:
                raise ConfigError(f"stage{si} has no blocks")
            for bi, spec in enumerate(stage.blocks, 1):
                spec.validate()
                if spec.in_ch != ch:
                    raise ConfigError(f"stage{si}.block{bi} expects {spec.in_ch} channels "
                                      f"but receives {ch}")
                ch = spec.out_ch
                stride *= spec.stride
            stage.attn.validate()
            if stage.attn.dim != ch:
                raise ConfigError(f"stage{si} attention dim {stage.attn.dim} != stage width {ch}")
            if stage.attn_depth < 1:
                raise ConfigError(f"stage{si} attention depth must be >= 1")
        if stride != 16:
            raise ConfigError(f"backbone must downsample 16x before the reduction, got {stride}x")
        self.final_attn.validate()
        if self.final_attn.dim != self.reduce_channels:
            raise ConfigError(f"final attention dim {self.final_attn.dim} != "
                              f"reduce_channels {self.reduce_channels}")
        if self.head_hidden < 1 or self.out_dim < 1:
            raise ConfigError("head sizes must be positive")

    @property
    def stage_out_channels(self) -> int:
        return self.stages[-1].blocks[-1].out_ch

    def to_flat(self) -> dict:
        return config_io.flatten(self, "model")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        try:
            d["stages"] = tuple(
                StageConfig(blocks=tuple(MBConvSpec(**b) for b in s["blocks"]),
                            attn=WindowAttnConfig(**s["attn"]),
                            attn_depth=s.get("attn_depth", 2))
                for s in d["stages"])
            d["final_attn"] = WindowAttnConfig(**d["final_attn"])
            for key in ("input_size", "dropout_rates"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from None

    @classmethod
    def from_flat(cls, flat: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        """Build from dotted keys; keys absent from ``flat`` come from ``base``."""
        merged = dict(base.to_flat()) if base is not None else {}
        merged.update({k: v for k, v in flat.items() if k.startswith("model.")})
        return cls.from_dict(config_io.unflatten(merged, "model"))


def _halve(n: int, times: int, ceil: bool = True) -> int:
    for _ in range(times):
        n = -(-n // 2) if ceil else n // 2
    return n


def pick_window(h: int, w: int, max_window: int = 7) -> int:
    """Largest window <= ``max_window`` tiling an ``h x w`` map exactly.

    Falls back to ``min(max_window, max(h, w))`` (with padding at run time)
    when only tiny divisors exist.
    """
    g = math.gcd(h, w)
    best = max(d for d in range(1, min(max_window, g) + 1) if g % d == 0)
    if best < min(4, h, w):
        return min(max_window, max(h, w))
    return best


def reference_config(input_size=224, **overrides) -> ModelConfig:
    """The EfficientNet-B0-derived block table, with windows fitted to ``input_size``."""
    H, W = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    M = MBConvSpec
    tables = (
        (M(32, 16, 1, 3, 1), M(16, 24, 6, 3, 2), M(24, 24, 6, 3, 1)),
        (M(24, 40, 6, 5, 2), M(40, 40, 6, 5, 1)),
        (M(40, 80, 6, 3, 2), M(80, 80, 6, 3, 1), M(80, 80, 6, 3, 1),
         M(80, 112, 6, 5, 1), M(112, 112, 6, 5, 1), M(112, 112, 6, 5, 1)),
    )
    heads = (3, 5, 7)
    stages = []
    for i, (blocks, h) in enumerate(zip(tables, heads)):
        win = pick_window(_halve(H, i + 2), _halve(W, i + 2))
        attn = WindowAttnConfig(blocks[-1].out_ch, h, win, win // 2, 2.0, True)
        stages.append(StageConfig(blocks, attn))
    fh, fw = _halve(_halve(H, 4), 1, ceil=False), _halve(_halve(W, 4), 1, ceil=False)
    fwin = pick_window(fh, fw)
    final = WindowAttnConfig(96, 6, fwin, fwin // 2, 2.0, True)
    cfg = ModelConfig(stages=tuple(stages), final_attn=final, input_size=(H, W))
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def apply_ablation(config: ModelConfig, which: str) -> ModelConfig:
    """Return a copy of ``config`` with one Res_CBAM component removed."""
    if which == "residual":
        return dataclasses.replace(config, residual_off=True)
    if which == "res_cbam":
        return dataclasses.replace(config, res_cbam_off=True)
    raise UsageError(f"unknown ablation {which!r}; choose from {ABLATIONS}")


# --------------------------------------------------------------------- modules

class Stage(Module):
    """MBConv blocks followed by shifted-window attention and stage dropout."""

    def __init__(self, cfg: StageConfig, rng: np.random.Generator, dropout: float):
        super().__init__()
        self.n_blocks = len(cfg.blocks)
        for i, spec in enumerate(cfg.blocks, 1):
            setattr(self, f"block{i}", MBConv(spec, rng))
        self.attn = GlobalInteraction(cfg.attn, rng, cfg.attn_depth)
        self.dropout = Dropout(dropout, rng.spawn(1)[0])

    def forward(self, x: Tensor) -> Tensor:
        for i in range(1, self.n_blocks + 1):
            x = getattr(self, f"block{i}")(x)
        return self.dropout(self.attn(x))


class Head(Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class FgiNet(Module):
    """Image batch ``[N, 3, H, W]`` -> raw 3-D gaze vectors ``[N, 3]``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = Conv2d(config.in_channels, config.stem_channels, 3, rng,
                           stride=config.stem_stride, padding=1, bias=False)
        self.stem_bn = BatchNorm2d(config.stem_channels)
        self.n_stages = len(config.stages)
        for i, (scfg, p) in enumerate(zip(config.stages, config.dropout_rates), 1):
            setattr(self, f"stage{i}", Stage(scfg, rng, p))
        self.reduce = ReduceDownsample(config.stage_out_channels, config.reduce_channels, rng)
        self.final_attn = GlobalInteraction(config.final_attn, rng, config.final_attn_depth)
        self.res_cbam = ResCBAM(config.reduce_channels, rng, enabled=not config.res_cbam_off,
                                residual=not config.residual_off,
                                reduction=config.cbam_reduction,
                                min_hidden=config.cbam_min_hidden)
        self.head = Head(config.reduce_channels, config.head_hidden, config.out_dim, rng)

    def stages(self) -> list:
        return [getattr(self, f"stage{i}") for i in range(1, self.n_stages + 1)]

    def set_dropout_rates(self, rates) -> None:
        rates = tuple(rates)
        if len(rates) != self.n_stages:
            raise ConfigError(f"expected {self.n_stages} dropout rates, got {rates}")
        for stage, p in zip(self.stages(), rates):
            if not 0 <= p < 1:
                raise ConfigError(f"dropout rate {p} outside [0, 1)")
            stage.dropout.p = float(p)

    def reseed_dropout(self, rng: np.random.Generator) -> None:
        for stage, child in zip(self.stages(), rng.spawn(self.n_stages)):
            stage.dropout.rng = child

    def forward(self, x, taps: dict | None = None) -> Tensor:
        """Run the network; intermediate maps are stored into ``taps`` if given
        (keys ``stem``, ``stage1`` .. ``stageK``, ``reduce``, ``final_attn``,
        ``res_cbam``, ``pooled``)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ConfigError(f"expected images [N, {self.config.in_channels}, H, W], got {x.shape}")

        def mark(name, t):
            if not np.isfinite(t.data).all():
                raise NumericError(f"non-finite activations after '{name}'")
            if taps is not None:
                taps[name] = t
            return t

        h = mark("stem", F.silu(self.stem_bn(self.stem(x))))
        for i, stage in enumerate(self.stages(), 1):
            h = mark(f"stage{i}", stage(h))
        h = mark("reduce", self.reduce(h))
        h = mark("final_attn", self.final_attn(h))
        h = mark("res_cbam", self.res_cbam(h))
        h = mark("pooled", h.mean(axis=(2, 3)))
        return mark("head", self.head(h))


def build(config: ModelConfig, rng: np.random.Generator | int | None = None) -> FgiNet:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return FgiNet(config, rng)


# ------------------------------------------------------------------ accounting

class CountReport(NamedTuple):
    total: int
    table: "OrderedDict[str, int]"


def count_params(net: Module) -> CountReport:
    """Total trainable parameters plus an inclusive subtotal for every module path."""
    table: OrderedDict[str, int] = OrderedDict()
    for path, mod in net.named_modules():
        table[path] = int(sum(p.data.size for p in mod.parameters()))
    return CountReport(table[""], table)


def count_flops(net: FgiNet, input_size=None) -> CountReport:
    """Multiply-accumulates of one forward pass on a single image.

    Convolutions, linear layers and attention matrix products are counted;
    normalisation, activations and pooling are not.
    """
    size = input_size or net.config.input_size
    H, W = (size, size) if isinstance(size, int) else tuple(size)
    x = Tensor(np.zeros((1, net.config.in_channels, H, W), dtype=DEFAULT_DTYPE))
    was_training = net.training
    saved = [buf.copy() for _, buf in net.named_buffers()]
    net.eval()
    try:
        with no_grad(), MacCounter() as counter:
            net(x)
    finally:
        net.train(was_training)
        for (_, buf), old in zip(net.named_buffers(), saved):
            buf[...] = old
    names = {id(m): path for path, m in net.named_modules()}
    table = OrderedDict((names[k], v) for k, v in counter.by_module.items() if k in names)
    table[""] = counter.total
    return CountReport(counter.total, table)


# ------------------------------------------------------------------ checkpoints

MAGIC = b"FGINET01"
VERSION = 1


def save_checkpoint(net: FgiNet, path) -> None:
    """Write config and every parameter/buffer as little-endian float32 records."""
    cfg_text = config_io.dumps(net.config.to_flat()).encode("utf-8")
    state = net.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_text)), cfg_text,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path) -> FgiNet:
    """Rebuild a model from :func:`save_checkpoint` output; all-or-nothing."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not an FGI-Net checkpoint (bad magic)")
    version, cfg_len = r.u32s(2)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        flat = config_io.loads(r.take(cfg_len).decode("utf-8"))
        config = ModelConfig.from_flat(flat)
        config.validate()
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid embedded config: {exc}") from None
    state = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = r.u32s(r.u32())
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last record")
    net = build(config, 0)
    try:
        net.load_state_dict(state)
    except ConfigError as exc:
        raise FormatError(f"{path}: parameters do not match embedded config: {exc}") from None
    return net
