"""Differentiable NCHW kernels built on :class:`~nucleihvt.tensor.Tensor`.

Convolutions gather patches with a strided window view (im2col without the
copy) and contract them against the kernel with ``tensordot``; the input
gradient scatters back tap by tap (col2im).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, _sigmoid, add_flops

__all__ = [
    "BatchNormState",
    "batchnorm2d",
    "conv2d",
    "conv_transpose2d",
    "cross_entropy_from_logits",
    "gelu",
    "layer_norm",
    "linear",
    "log_softmax",
    "maxpool2d",
    "mish",
    "softmax",
]


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, k, k) over a padded NCHW array."""
    span = dilation * (k - 1) + 1
    v = sliding_window_view(xp, (span, span), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]


def _scatter_taps(dst: np.ndarray, cols: np.ndarray, k: int, stride: int, dilation: int) -> None:
    """Accumulate per-tap columns (N, C, Ho, Wo, k, k) into ``dst`` (col2im)."""
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            dst[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += cols[
                ..., i, j
            ]


def _full_correlation(g: np.ndarray, wd: np.ndarray, dilation: int, padding: int, h: int, w: int) -> np.ndarray:
    """Input gradient of a stride-1 convolution: correlate the padded output
    gradient with the spatially flipped, channel-transposed kernel."""
    k = wd.shape[-1]
    edge = dilation * (k - 1) - padding
    lo = max(edge, 0)
    gp = np.pad(g, ((0, 0), (0, 0), (lo, lo), (lo, lo)))
    if edge < 0:
        gp = gp[:, :, -edge : gp.shape[2] + edge, -edge : gp.shape[3] + edge]
    wf = wd[:, :, ::-1, ::-1]
    cols = _windows(gp, k, 1, dilation, h, w)
    return np.ascontiguousarray(np.tensordot(cols, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation. ``groups`` may be 1 or the channel count (depthwise)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv2d geometry: stride={stride} padding={padding} dilation={dilation}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {k}x{k2}")
    depthwise = groups != 1
    if depthwise:
        if groups != c or o != c or ci != 1:
            raise ValueError(f"depthwise conv2d needs weight ({c}, 1, k, k), got {weight.shape}")
    elif ci != c:
        raise ValueError(f"conv2d input channel dimension is {c} but weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    ho = _out_extent(h, k, stride, padding, dilation)
    wo = _out_extent(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d window larger than padded input ({h}x{w}, k={k}, dilation={dilation})")
    if k == 1 and stride == 1 and padding == 0 and not depthwise:
        return _pointwise_conv(x, weight, bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride, dilation, ho, wo)
    wd = weight.data
    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += cols[..., i, j] * wd[:, 0, i, j][None, :, None, None]
    else:
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    add_flops(2 * out.size * ci * k * k)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            if depthwise:
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(k):
                    r0 = i * dilation
                    for j in range(k):
                        c0 = j * dilation
                        gxp[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += (
                            g * wd[:, 0, i, j][None, :, None, None]
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
            elif stride == 1:
                gx = _full_correlation(g, wd, dilation, padding, h, w)
            else:
                gcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                _scatter_taps(gxp, gcols, k, stride, dilation)
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            if depthwise:
                gw = np.einsum("nchw,nchwij->cij", g, cols)[:, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, inputs, backward)


def _pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = x.shape
    o = weight.shape[0]
    w2 = weight.data[:, :, 0, 0]
    xf = x.data.reshape(n, c, h * w)
    out = np.matmul(w2, xf)
    if bias is not None:
        out += bias.data[None, :, None]
    add_flops(2 * out.size * c)

    def backward(g):
        gf = g.reshape(n, o, h * w)
        gx = np.matmul(w2.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))[:, :, None, None]
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out.reshape(n, o, h, w), inputs, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution; ``weight`` has shape (in, out, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects NCHW input and IOkk weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid conv_transpose2d geometry: stride={stride} padding={padding}")
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d input channel dimension is {c} but weight expects {ci}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d padding removes the whole output")

    wd = weight.data
    cols = np.tensordot(x.data, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)  # N,O,H,W,k,k
    full = np.zeros((n, o, hf, wf), dtype=x.dtype)
    _scatter_taps(full, cols, k, stride, 1)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]
    add_flops(2 * x.size * o * k * k)

    def backward(g):
        gx = gw = gb = None
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        view = _windows(gp, k, stride, 1, h, w)  # N,O,H,W,k,k
        if x.requires_grad:
            gx = np.ascontiguousarray(np.tensordot(view, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = np.tensordot(x.data, view, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, inputs, backward)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window maximum; ties resolve to the first position in row-major order."""
    if kernel < 1:
        raise ValueError("maxpool kernel must be >= 1")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, padding, 1)
    wo = _out_extent(w, kernel, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool window {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    cols = _windows(xp, kernel, stride, 1, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    arg = np.argmax(cols, axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        onehot = (arg[..., None] == np.arange(kernel * kernel)) * g[..., None]
        _scatter_taps(gxp, onehot.reshape(n, c, ho, wo, kernel, kernel), kernel, stride, 1)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (updated in place)."""

    mean: np.ndarray
    var: np.ndarray


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    count = n * h * w
    if count == 0:
        raise ValueError("batchnorm over an empty batch")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if state is not None:
            unbiased = var * (count / max(count - 1, 1))
            state.mean[...] = (1 - momentum) * state.mean + momentum * mean
            state.var[...] = (1 - momentum) * state.var + momentum * unbiased
    else:
        if state is None:
            raise ValueError("batchnorm eval mode needs running statistics")
        mean, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
        xc = xd - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data[None, :, None, None]
            if training:
                m1 = gh.mean(axis=(0, 2, 3))[None, :, None, None]
                m2 = (gh * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                gx = (gh - m1 - xhat * m2) * inv[None, :, None, None]
            else:
                gx = gh * inv[None, :, None, None]
        return gx, gg, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,):
        raise ValueError(f"layer_norm gamma must have shape ({d},), got {gamma.shape}")
    mean = xd.mean(axis=-1, keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = x @ weight
    return out if bias is None else out + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward)


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    xd = x.data
    e = np.exp(np.minimum(xd, 20.0))
    n = e * (e + 2.0)
    t = n / (n + 2.0)  # tanh(log1p(e))
    y = xd * t

    def backward(g):
        sig = e / (1.0 + e)
        return (g * (t + xd * (1 - t * t) * sig),)

    return Tensor._make(y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return Tensor._make(xd * cdf, (x,), backward)


def cross_entropy_from_logits(logits: Tensor, target: np.ndarray, axis: int = 1, clamp: float = 1e-12) -> Tensor:
    """Mean negative log-probability of ``target`` classes along ``axis``.

    Probabilities are floored at ``clamp`` before the log.
    """
    logp = log_softmax(logits, axis=axis)
    picked = np.expand_dims(target, axis)
    lp = np.take_along_axis(logp.data, picked, axis=axis)
    floor = np.log(clamp)
    active = lp > floor
    shape = logp.shape
    count = target.size

    def backward(g):
        full = np.zeros(shape, dtype=logp.dtype)
        np.put_along_axis(full, picked, -(g / count) * active, axis=axis)
        return (full,)

    value = -np.maximum(lp, floor).sum() / count
    return Tensor._make(np.asarray(value, dtype=logits.dtype), (logp,), backward)
