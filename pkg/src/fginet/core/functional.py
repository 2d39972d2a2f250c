"""Differentiable primitives over :class:`~fginet.core.tensor.Tensor`.

Layout is NCHW for images. Every primitive keeps the floating precision of
its inputs, so a graph built from 64-bit tensors stays 64-bit end to end.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ConfigError, UsageError
from . import _kernels
from .counting import record_macs
from .tensor import Tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (axis,)
    return tuple(sorted(int(a) % ndim for a in axis))


def _pair(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    # sign(0) == 0 gives the zero subgradient at the kink
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    record_macs(out.size * ad.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions

def _expand_grad(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    return Tensor._from_op(
        x.data.sum(axis=axes, keepdims=keepdims), (x,),
        lambda g: (_expand_grad(g, shape, axes, keepdims),), "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = math.prod(shape[a] for a in axes)
    return Tensor._from_op(
        x.data.mean(axis=axes, keepdims=keepdims), (x,),
        lambda g: (_expand_grad(g / count, shape, axes, keepdims),), "mean")


def amax(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal element
    in row-major order of the reduced axes."""
    axes = _norm_axes(axis, x.ndim)
    rest = tuple(a for a in range(x.ndim) if a not in axes)
    perm = rest + axes
    moved = x.data.transpose(perm)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    kept_shape = tuple(1 if a in axes else s for a, s in enumerate(x.shape))
    out = out.reshape(kept_shape) if keepdims else out.reshape([x.shape[a] for a in rest])

    def backward(g):
        g_flat = np.zeros_like(flat)
        np.put_along_axis(g_flat, idx, g.reshape(idx.shape[:-1])[..., None], axis=-1)
        return (g_flat.reshape(moved.shape).transpose(np.argsort(perm)),)

    return Tensor._from_op(out, (x,), backward, "max")


# ------------------------------------------------------------------ reshaping

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=ax), tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def pad(x: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` holds one ``(before, after)`` pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if not any(b or a for b, a in widths):
        return x
    crop = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return Tensor._from_op(np.pad(x.data, widths), (x,), lambda g: (g[crop],), "pad")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return Tensor._from_op(
        np.roll(x.data, shifts, axes), (x,),
        lambda g: (np.roll(g, back, axes),), "roll")


# ---------------------------------------------------------------- activations

def _logistic(a: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and several times faster than expit on float32
    y = np.tanh(a * 0.5)
    y *= 0.5
    y += 0.5
    return y


def sigmoid(x: Tensor) -> Tensor:
    y = _logistic(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _logistic(xd)
    return Tensor._from_op(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), "silu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


_INV_SQRT2 = 1 / math.sqrt(2.0)
_INV_SQRT2PI = 1 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1 + erf(xd * _INV_SQRT2))

    def backward(g):
        return (g * (cdf + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI),)

    return Tensor._from_op(xd * cdf, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._from_op(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------- conv

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with grouped kernels.

    ``weight`` has shape ``[Cout, Cin // groups, kh, kw]``. Depthwise
    kernels (one input and one output channel per group) take a dedicated
    shift-and-scale path; everything else is lowered to batched GEMMs.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigError(f"groups={groups} must divide in_channels={C} and out_channels={O}")
    if Cg * groups != C:
        raise ConfigError(f"weight {weight.shape} expects {Cg * groups} input channels, input has {C}")
    if bias is not None and bias.shape != (O,):
        raise ConfigError(f"bias shape {bias.shape} does not match {O} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    G, Og = groups, O // groups
    K = Cg * kh * kw
    record_macs(N * O * Ho * Wo * K)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd

    def rows(i):
        return slice(i, i + sh * (Ho - 1) + 1, sh)

    def cols_(j):
        return slice(j, j + sw * (Wo - 1) + 1, sw)

    depthwise = Cg == 1 and Og == 1
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1
    cols = None
    if depthwise:
        dtype = np.result_type(xd, wd)
        xp = np.ascontiguousarray(xp, dtype=dtype)
        w3 = np.ascontiguousarray(wd[:, 0], dtype=dtype)
        out = _kernels.depthwise_forward(xp, w3, sh, sw, Ho, Wo)
    else:
        if pointwise:
            cols = xp.reshape(N, G, Cg, Ho * Wo)
        else:
            win = sliding_window_view(xp.reshape(N, G, Cg, Hp, Wp), (kh, kw), axis=(3, 4))
            win = win[:, :, :, ::sh, ::sw][:, :, :, :Ho, :Wo]
            cols = np.ascontiguousarray(win.transpose(0, 1, 2, 5, 6, 3, 4)).reshape(N, G, K, Ho * Wo)
        out = np.matmul(wd.reshape(G, Og, K), cols).reshape(N, O, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if depthwise:
            gc = np.ascontiguousarray(g, dtype=xp.dtype)
            if x.requires_grad:
                gxp = _kernels.depthwise_grad_input(xp.shape, w3, gc, sh, sw)
            if weight.requires_grad:
                gw = _kernels.depthwise_grad_weight(xp, gc, sh, sw, kh, kw)
                gw = gw.reshape(wd.shape).astype(wd.dtype, copy=False)
        else:
            g3 = g.reshape(N, G, Og, Ho * Wo)
            if weight.requires_grad:
                gw = np.matmul(g3, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(wd.reshape(G, Og, K), -1, -2), g3)
                if pointwise:
                    gxp = gcols.reshape(N, C, Hp, Wp)
                else:
                    gcols = gcols.reshape(N, G, Cg, kh, kw, Ho, Wo)
                    gxp = np.zeros((N, G, Cg, Hp, Wp), dtype=gcols.dtype)
                    for i in range(kh):
                        for j in range(kw):
                            gxp[:, :, :, rows(i), cols_(j)] += gcols[:, :, :, i, j]
                    gxp = gxp.reshape(N, C, Hp, Wp)
        if x.requires_grad:
            gx = gxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def pool2d(x: Tensor, kind: str = "avg", window="global") -> Tensor:
    """Average or max pooling with non-overlapping windows (stride == window).

    ``window="global"`` reduces each channel to a single value.
    """
    if kind not in ("avg", "max"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    reduce = mean if kind == "avg" else amax
    if isinstance(window, str):
        if window != "global":
            raise ConfigError(f"unknown pooling window {window!r}")
        return reduce(x, (2, 3), True)
    kh, kw = _pair(window)
    N, C, H, W = x.shape
    if kh < 1 or kw < 1 or kh > H or kw > W:
        raise ConfigError(f"pooling window {kh}x{kw} does not fit input {H}x{W}")
    Ho, Wo = H // kh, W // kw
    if Ho * kh != H or Wo * kw != W:
        x = getitem(x, (slice(None), slice(None), slice(0, Ho * kh), slice(0, Wo * kw)))
    return reduce(reshape(x, (N, C, Ho, kh, Wo, kw)), (3, 5), False)


def channel_pool(x: Tensor) -> Tensor:
    """Stack the per-pixel channel mean and channel max: [N,C,H,W] -> [N,2,H,W]."""
    if x.ndim != 4:
        raise ConfigError(f"channel_pool expects NCHW input, got {x.shape}")
    return concat([mean(x, 1, True), amax(x, 1, True)], axis=1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is ``[Dout, Din]``."""
    Dout, Din = weight.shape
    if x.shape[-1] != Din:
        raise ConfigError(f"linear expects last extent {Din}, got input {x.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, Din)
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    record_macs(x2.shape[0] * Din * Dout)

    def backward(g):
        g2 = g.reshape(-1, Dout)
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out.reshape(xd.shape[:-1] + (Dout,)), parents, backward, "linear")


# -------------------------------------------------------------- normalization

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the running statistics are updated in place (unbiased
    variance); in eval mode only the running statistics are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ConfigError(f"batch_norm2d parameters {gamma.shape} do not match input {x.shape}")
    xd = x.data
    axes = (0, 2, 3)
    b = (None, slice(None), None, None)
    gd = gamma.data
    if training:
        M = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (M / max(M - 1, 1))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[b]) * invstd[b]
        out = xhat * gd[b] + beta.data[b]

        def backward(g):
            gb = g.sum(axis=axes)
            gg = (g * xhat).sum(axis=axes)
            gx = None
            if x.requires_grad:
                gx = (gd * invstd / M)[b] * (M * g - gb[b] - xhat * gg[b])
            return gx, gg, gb
    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        scale = (gd * invstd).astype(xd.dtype, copy=False)
        centered = xd - running_mean[b]
        out = centered * scale[b] + beta.data[b]

        def backward(g):
            gx = g * scale[b] if x.requires_grad else None
            gg = (g * centered).sum(axis=axes) * invstd
            return gx, gg, g.sum(axis=axes)

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over a single ``axis`` with per-feature scale and shift."""
    ax = axis % x.ndim
    D = x.shape[ax]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ConfigError(f"layer_norm parameters {gamma.shape} do not match axis extent {D}")
    xd = x.data
    bshape = [1] * x.ndim
    bshape[ax] = D
    gd = gamma.data.reshape(bshape)
    red = tuple(a for a in range(x.ndim) if a != ax)
    mu = xd.mean(axis=ax, keepdims=True)
    var = xd.var(axis=ax, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = (invstd / D) * (D * gxhat - gxhat.sum(axis=ax, keepdims=True)
                                 - xhat * (gxhat * xhat).sum(axis=ax, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)``."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an explicit random generator")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    mask = (rng.random(x.shape, dtype=dtype) >= p).astype(x.dtype)
    mask *= 1.0 / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
