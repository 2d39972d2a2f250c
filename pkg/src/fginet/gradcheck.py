"""Finite-difference gradient suite over every layer and block of the model.

Each case builds its subject in float64, contracts the output with a fixed
random tensor (or applies the L1 loss for the full model) and compares
analytic gradients of the input and of the parameters against central
differences. Large tensors are probed at a few random entries.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple

import numpy as np

from .blocks import ChannelAttention, MBConv, MBConvSpec, ResCBAM, SpatialAttention, SqueezeExcite
from .core import functional as F
from .core.gradcheck import finite_diff_grad, max_relative_error
from .core.nn import Module
from .core.tensor import Tensor
from .model import build, reference_config
from .training import l1_loss
from .window_attention import (GlobalInteraction, ReduceDownsample, WindowAttnConfig,
                               WindowMSA)

TOLERANCE = 1e-4
# narrow three-point step: safe near relu/max kinks but carries ~1e-9 of
# rounding noise; wide five-point step: ~100x less noise away from kinks
NARROW_STEP = 1e-5
WIDE_STEP = 1e-3


class GradResult(NamedTuple):
    case: str
    seed: int
    max_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error < TOLERANCE)


def _leaves(rng, shapes):
    return [Tensor(rng.normal(size=s), requires_grad=True, dtype=np.float64) for s in shapes]


def numeric_grad(loss: Callable[[], Tensor], t: Tensor, indices=None) -> np.ndarray:
    """Finite-difference gradient that picks, per entry, the wide five-point
    estimate when it agrees with the narrow three-point one and the narrow
    estimate otherwise (a kink inside the wide stencil). The choice never
    looks at the analytic gradient.
    """
    narrow = finite_diff_grad(lambda _: loss(), t, NARROW_STEP, indices=indices)
    wide = finite_diff_grad(lambda _: loss(), t, WIDE_STEP, indices=indices, order=4)
    scale = np.maximum(np.abs(narrow), np.abs(wide))
    agree = np.abs(wide - narrow) <= 1e-5 * scale + 1e-8
    return np.where(agree, wide, narrow)


def _check(loss: Callable[[], Tensor], tensors, rng, entries: int | None) -> tuple:
    for t in tensors:
        t.grad = None
    loss().backward()
    worst, checked = 0.0, 0
    for t in tensors:
        idx = None
        if entries is not None and t.size > entries:
            idx = rng.choice(t.size, entries, replace=False)
        num = numeric_grad(loss, t, idx)
        ana = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, max_relative_error(ana, num))
        checked += t.size if idx is None else len(idx)
    return worst, checked


def _op_case(fn, *shapes):
    def run(rng):
        xs = _leaves(rng, shapes)
        w = Tensor(rng.normal(size=fn(*xs).shape), dtype=np.float64)
        return _check(lambda: (fn(*xs) * w).sum(), xs, rng, None)
    return run


def _module_case(make: Callable[[np.random.Generator], Module], in_shape, entries: int = 6,
                 param_filter: Callable[[str], bool] | None = None):
    def run(rng):
        mod = make(rng).to(np.float64)
        mod.train()
        (x,) = _leaves(rng, [in_shape])
        w = Tensor(rng.normal(size=mod(x).shape), dtype=np.float64)
        params = [p for name, p in mod.named_parameters()
                  if param_filter is None or param_filter(name)]
        return _check(lambda: (mod(x) * w).sum(), [x] + params, rng, entries)
    return run


def _model_case(size: int = 32, n_probe: int = 16, entries: int = 3):
    def run(rng):
        net = build(reference_config(size), rng).to(np.float64)
        net.train()
        (x,) = _leaves(rng, [(2, 3, size, size)])
        target = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        named = list(net.named_parameters())
        pick = np.linspace(0, len(named) - 1, n_probe).round().astype(int)
        params = [named[i][1] for i in sorted(set(pick))]
        return _check(lambda: l1_loss(net(x), target), [x] + params, rng, entries)
    return run


def _conv(stride=1, padding=0, groups=1, bias=True):
    def fn(x, w, *b):
        return F.conv2d(x, w, b[0] if b else None, stride=stride, padding=padding, groups=groups)
    return fn


def _small_attn(dim=8, heads=2, window=4, shift=0, depth=None):
    cfg = WindowAttnConfig(dim, heads, window, shift, 2.0, True)
    if depth is None:
        return lambda rng: WindowMSA(cfg, rng)
    return lambda rng: GlobalInteraction(dataclasses.replace(cfg, shift=shift), rng, depth)


def _cases() -> dict:
    return {
        "conv2d/standard_s2_p1": _op_case(_conv(2, 1), (2, 3, 7, 7), (4, 3, 3, 3), (4,)),
        "conv2d/grouped": _op_case(_conv(1, 1, 2), (2, 4, 5, 5), (6, 2, 3, 3), (6,)),
        "conv2d/depthwise_k3_s1": _op_case(_conv(1, 1, 4), (2, 4, 6, 6), (4, 1, 3, 3), (4,)),
        "conv2d/depthwise_k5_s2": _op_case(_conv(2, 2, 3), (2, 3, 7, 7), (3, 1, 5, 5)),
        "conv2d/pointwise": _op_case(_conv(), (2, 4, 3, 5), (6, 4, 1, 1), (6,)),
        "conv2d/patch_2x2_s2": _op_case(_conv(2), (2, 3, 6, 6), (5, 3, 2, 2), (5,)),
        "conv2d/spatial_7x7": _op_case(_conv(1, 3), (2, 2, 6, 6), (1, 2, 7, 7), (1,)),
        "pool/avg_2x2": _op_case(lambda x: F.pool2d(x, "avg", 2), (2, 3, 4, 6)),
        "pool/max_2x2": _op_case(lambda x: F.pool2d(x, "max", 2), (2, 3, 4, 6)),
        "pool/global_avg": _op_case(lambda x: F.pool2d(x, "avg", "global"), (2, 3, 4, 5)),
        "pool/global_max": _op_case(lambda x: F.pool2d(x, "max", "global"), (2, 3, 4, 5)),
        "pool/channel": _op_case(F.channel_pool, (2, 3, 4, 5)),
        "linear": _op_case(lambda x, w, b: F.linear(x, w, b), (2, 3, 4), (5, 4), (5,)),
        "norm/batch_train": _op_case(
            lambda x, g, b: F.batch_norm2d(x, g, b, np.zeros(3), np.ones(3), True),
            (2, 3, 4, 5), (3,), (3,)),
        "norm/batch_eval": _op_case(
            lambda x, g, b: F.batch_norm2d(x, g, b, np.full(3, 0.1), np.full(3, 2.0), False),
            (2, 3, 4, 5), (3,), (3,)),
        "norm/layer": _op_case(lambda x, g, b: F.layer_norm(x, g, b, axis=1),
                               (2, 3, 4, 5), (3,), (3,)),
        "act/sigmoid_silu_relu_gelu": _op_case(
            lambda x: F.sigmoid(x) + F.silu(x) + F.relu(x) + F.gelu(x), (3, 7)),
        "act/softmax": _op_case(lambda x: F.softmax(x, -1), (2, 3, 5)),
        "squeeze_excite": _module_case(lambda r: SqueezeExcite(12, 2, r), (2, 12, 4, 4)),
        "mbconv/e1_k3": _module_case(lambda r: MBConv(MBConvSpec(8, 4, 1, 3, 1), r), (2, 8, 6, 6)),
        "mbconv/e6_k5_s2": _module_case(lambda r: MBConv(MBConvSpec(4, 6, 6, 5, 2), r), (2, 4, 8, 8)),
        "mbconv/e6_k3_skip": _module_case(lambda r: MBConv(MBConvSpec(4, 4, 6, 3, 1), r), (2, 4, 6, 6)),
        "w_msa": _module_case(_small_attn(), (2, 8, 8, 8)),
        "sw_msa": _module_case(_small_attn(shift=2), (2, 8, 8, 8)),
        "sw_msa/padded": _module_case(_small_attn(shift=2), (1, 8, 6, 10)),
        "global_interaction": _module_case(_small_attn(shift=2, depth=2), (1, 8, 8, 8)),
        "reduce_downsample": _module_case(lambda r: ReduceDownsample(6, 4, r), (2, 6, 4, 4)),
        "spatial_attention": _module_case(lambda r: SpatialAttention(r), (2, 5, 6, 6)),
        "channel_attention": _module_case(lambda r: ChannelAttention(16, r, 16, 8), (2, 16, 3, 3)),
        "res_cbam": _module_case(lambda r: ResCBAM(16, r), (2, 16, 4, 4)),
        "res_cbam/no_residual": _module_case(lambda r: ResCBAM(16, r, residual=False), (2, 16, 4, 4)),
        "model/l1": _model_case(),
    }


CASE_NAMES = tuple(_cases())


def run_suite(seeds=(0, 1, 2), cases=None, report: Callable[[GradResult], None] | None = None) -> list:
    """Run the named ``cases`` (default all) once per seed."""
    table = _cases()
    names = CASE_NAMES if cases is None else tuple(cases)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"unknown gradcheck cases {unknown}")
    results = []
    for seed in seeds:
        for name in names:
            err, checked = table[name](np.random.default_rng([seed, CASE_NAMES.index(name)]))
            res = GradResult(name, int(seed), err, checked)
            results.append(res)
            if report is not None:
                report(res)
    return results
