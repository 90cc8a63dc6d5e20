"""Differentiable neural-network primitives built on :mod:`fraesormer.tensor`."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateRowError, DimensionError
from .tensor import Tensor, _record, global_avg_pool, matmul, mean_all, transpose

GELU_COEF = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- convolution
def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding over an NCHW input."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide in_channels={c} and out_channels={o}")
    if cg != c // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be ≥1 and padding ≥0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}")

    xd, wd = x.data, weight.data
    if kh == kw == 1 and stride == 1 and padding == 0 and groups == 1:
        out, backward = _pointwise(xd, wd)
    elif cg == 1 and o == c:
        out, backward = _depthwise(xd, wd, stride, padding, ho, wo)
    else:
        out, backward = _grouped(xd, wd, stride, padding, groups, ho, wo)

    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def full_backward(g):
        gx, gw = backward(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(out, parents, full_backward, "conv2d")


def _pointwise(xd, wd):
    n, c, h, w = xd.shape
    o = wd.shape[0]
    w2 = wd.reshape(o, c)
    x3 = xd.reshape(n, c, h * w)
    out = np.matmul(w2, x3).reshape(n, o, h, w)

    def backward(g):
        g3 = g.reshape(n, o, h * w)
        gx = np.matmul(w2.T, g3).reshape(xd.shape)
        gw = np.einsum("nop,ncp->oc", g3, x3).reshape(wd.shape)
        return gx, gw

    return out, backward


def _depthwise(xd, wd, stride, padding, ho, wo):
    n, c, h, w = xd.shape
    _, _, kh, kw = wd.shape
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            tap = wd[:, 0, i, j][None, :, None, None]
            out += xp[:, :, i : i + s * ho : s, j : j + s * wo : s] * tap

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.zeros(wd.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                window = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                gw[:, 0, i, j] = (g * xp[window]).sum(axis=(0, 2, 3))
                gxp[window] += g * wd[:, 0, i, j][None, :, None, None]
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw

    return out, backward


def _grouped(xd, wd, stride, padding, groups, ho, wo):
    # im2col: (N, G, Ho*Wo, Cg*kh*kw) @ (G, Cg*kh*kw, Og)
    n, c, h, w = xd.shape
    o, cg, kh, kw = wd.shape
    p, s, gr = padding, stride, groups
    og, kk = o // gr, cg * kh * kw
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.reshape(n, gr, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    cols = cols.reshape(n, gr, ho * wo, kk)
    wmat = wd.reshape(gr, og, kk).transpose(0, 2, 1)
    out = np.matmul(cols, wmat).transpose(0, 1, 3, 2).reshape(n, o, ho, wo)

    def backward(g):
        gm = g.reshape(n, gr, og, ho * wo).transpose(0, 1, 3, 2)
        gw = np.matmul(cols.transpose(0, 1, 3, 2), gm).sum(axis=0)
        gw = gw.transpose(0, 2, 1).reshape(wd.shape)
        gcols = np.matmul(gm, wmat.transpose(0, 2, 1)).reshape(n, gr, ho, wo, cg, kh, kw)
        gcols = gcols.transpose(0, 1, 4, 2, 3, 5, 6).reshape(n, c, ho, wo, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[..., i, j]
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw

    return out, backward


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a weight stored as (out, in)."""
    return matmul(x, transpose(weight, (1, 0)), bias)


def linear_matmul(a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
    return matmul(a, b, bias)


# -------------------------------------------------------------------- softmax
def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. ``-inf`` entries map to exactly 0."""
    xd = x.data
    row_max = xd.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise DegenerateRowError("softmax row has no finite entry")
    e = np.exp(xd - row_max)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward, "softmax")


softmax = softmax_rows


# -------------------------------------------------------------- normalization
def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the channel axis of an NCHW tensor, per spatial position."""
    if x.ndim != 4:
        raise DimensionError(f"layer_norm_channels expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data[None, :, None, None]
    out = xhat * gam + beta.data[None, :, None, None]

    def backward(g):
        gxhat = g * gam
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- activations
def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = GELU_COEF * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_COEF * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def reduce_ops(x: Tensor, kind: str) -> Tensor:
    if kind == "mean_all":
        return mean_all(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ConfigError(f"unknown reduction {kind!r}")


# ----------------------------------------------------------------------- loss
def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)
    return _record(out, (x,), lambda g: (g - y * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (N, K)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (N,K) logits and (N,) targets")
    n, k = logits.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise DimensionError("target class out of range")
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, targets]).mean()
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss, dtype=xd.dtype), (logits,), backward, "cross_entropy")
