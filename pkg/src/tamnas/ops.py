"""Differentiable operations over :class:`~tamnas.engine.Tensor`.

All activations are NCHW. Reductions and losses accumulate in float64 and
cast back to the input dtype; everything else stays in the input dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import Tensor, as_tensor, make_node
from .errors import ShapeError, TamNasError

ACC = np.float64


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution, weight layout (out, in, k, k)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4:
        raise ShapeError("conv2d", "input.ndim", xd.ndim, "expected", 4)
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError("conv2d", "input.C", xd.shape[1], "weight.I", wd.shape[1])
    k = wd.shape[2]
    if wd.shape[3] != k or k % 2 == 0:
        raise ShapeError("conv2d", "weight.kh", wd.shape[2], "weight.kw", wd.shape[3])
    if stride not in (1, 2):
        raise TamNasError(f"conv2d: stride must be 1 or 2, got {stride}")
    if b is not None and b.data.shape != (wd.shape[0],):
        raise ShapeError("conv2d", "bias.O", b.data.shape[0], "weight.O", wd.shape[0])
    n, c, h, wid = xd.shape
    o = wd.shape[0]
    ho, wo = _out_size(h, k, stride, padding), _out_size(wid, k, stride, padding)

    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, xs.reshape(n, c, -1)).reshape(n, o, ho, wo)
        windows = None
    else:
        xp = _pad(xd, padding)
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def grad_fn(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=ACC).astype(g.dtype)
        if windows is None:
            xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
            g3 = g.reshape(n, o, -1)
            if w.requires_grad:
                xs3 = xs.reshape(n, c, -1)
                gw = np.matmul(g3, xs3.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                gxs = np.matmul(wd.reshape(o, c).T, g3).reshape(n, c, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            return gx, gw, gb
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            cols = np.tensordot(g, wd, axes=([1], [0]))  # n, ho, wo, c, k, k
            gxp = np.zeros((n, c, h + 2 * padding, wid + 2 * padding), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, grad_fn)


def _row_toeplitz(taps: np.ndarray, wp: int, wo: int, stride: int) -> tuple:
    """Matrices ``T[c, p, i, o] = taps[c, i, p - stride*o]`` (zero off-band)."""
    c, k, _ = taps.shape
    cols = np.arange(wo)[None, :] * stride + np.arange(k)[:, None]  # (j, o)
    outs = np.broadcast_to(np.arange(wo)[None, :], cols.shape)
    t = np.zeros((c, wp, k, wo), dtype=taps.dtype)
    t[:, cols, :, outs] = taps.transpose(2, 0, 1)[:, None, :, :]
    return t, cols, outs


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution, weight layout (C, 1, k, k).

    Each kernel row ``i`` acts on image rows as a banded (Toeplitz) matrix,
    so one batched matmul per channel gives every row's partial sums and
    the output is the sum of ``k`` row-shifted slices of that product.
    """
    xd, wd = x.data, w.data
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError("depthwise_conv2d", "input.C", xd.shape[1], "weight.C", wd.shape[0])
    k = wd.shape[2]
    if k % 2 == 0 or wd.shape[3] != k:
        raise ShapeError("depthwise_conv2d", "weight.kh", wd.shape[2], "weight.kw", wd.shape[3])
    n, c, h, wid = xd.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wid, k, stride, padding)
    xp = _pad(xd, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    t, cols, outs = _row_toeplitz(wd[:, 0], wp, wo, stride)
    tm = t.reshape(c, wp, k * wo)
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, n * hp, wp)
    y = np.matmul(xc, tm).reshape(c, n, hp, k, wo)
    last = stride * (ho - 1) + 1
    acc = y[:, :, 0:last:stride, 0, :].copy()
    for i in range(1, k):
        acc += y[:, :, i : i + last : stride, i, :]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def grad_fn(g):
        gc = g.transpose(1, 0, 2, 3)
        gy = np.zeros((c, n, hp, k, wo), dtype=xd.dtype)
        for i in range(k):
            gy[:, :, i : i + last : stride, i, :] = gc
        gym = gy.reshape(c, n * hp, k * wo)
        gx = gw = None
        if w.requires_grad:
            gt = np.matmul(xc.transpose(0, 2, 1), gym).reshape(c, wp, k, wo)
            gw = gt[:, cols, :, outs].sum(axis=1).transpose(1, 2, 0)[:, None]
        if x.requires_grad:
            gxc = np.matmul(gym, tm.transpose(0, 2, 1)).reshape(c, n, hp, wp)
            gx = gxc.transpose(1, 0, 2, 3)[:, :, padding : padding + h, padding : padding + wid]
        return gx, gw

    return make_node(out, (x, w), grad_fn)


# --------------------------------------------------------------------------
# normalization

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except 1.

    In train mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, PyTorch convention).
    """
    xd = x.data
    dt = xd.dtype
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batch_norm", "input.C", c, "gamma.C", gamma.data.shape[0])
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    m = xd.size // c
    # statistics accumulate in float64; elementwise work stays in the input dtype
    if train:
        mean = xd.mean(axis=axes, dtype=ACC)
        centered = xd - mean.astype(dt).reshape(bshape)
        var = np.square(centered).mean(axis=axes, dtype=ACC)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        var = running_var.astype(ACC)
        centered = xd - running_mean.astype(dt).reshape(bshape)
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(bshape)
    xhat = centered * invstd
    gam = gamma.data.astype(dt).reshape(bshape)
    out = xhat * gam + beta.data.astype(dt).reshape(bshape)

    def grad_fn(g):
        gbeta = g.sum(axis=axes, dtype=ACC).astype(beta.dtype) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=axes, dtype=ACC).astype(gamma.dtype) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            if train:
                s1 = dxhat.sum(axis=axes, dtype=ACC).astype(dt).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes, dtype=ACC).astype(dt).reshape(bshape)
                gx = (invstd / dt.type(m)) * (dt.type(m) * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), grad_fn)


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0).astype(x.dtype, copy=False)  # NaN propagates rather than hiding
    return make_node(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_node(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def grad_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    out = (x.data * factor).astype(x.dtype)
    return make_node(out, (x,), lambda g: ((g * factor).astype(g.dtype),))


# --------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=ACC), dtype=x.dtype)
    return make_node(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=ACC), dtype=x.dtype)
    return make_node(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=ACC).astype(x.dtype)

    def grad_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_node(out, (x,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "a.cols", a.shape[-1], "b.rows", b.shape[-2])
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), grad_fn)


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, in) against weight (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError("fully_connected", "input.features", x.shape[-1], "weight.in", w.shape[1])
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0, dtype=ACC).astype(g.dtype) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out.astype(xd.dtype, copy=False), parents, grad_fn)


def _softmax64(z: np.ndarray, axis: int) -> np.ndarray:
    z = z.astype(ACC)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax64(z: np.ndarray, axis: int) -> np.ndarray:
    z = z.astype(ACC)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True, dtype=ACC).astype(x.dtype)
    out = s

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True, dtype=ACC).astype(x.dtype)
        return (s * (g - dot),)

    return make_node(out, (x,), grad_fn)


def concat(tensors: list, axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return tuple(parts)

    return make_node(out, tuple(tensors), grad_fn)


def split(x: Tensor, axis: int, at: int) -> tuple:
    """Split into ``[:at]`` and ``[at:]`` along ``axis``."""
    n = x.shape[axis]
    if not 0 < at < n:
        raise ShapeError("split", "at", at, f"axis{axis}", n)
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, at)
    hi[axis] = slice(at, n)
    lo, hi = tuple(lo), tuple(hi)

    def grad_lo(g):
        full = np.zeros_like(x.data)
        full[lo] = g
        return (full,)

    def grad_hi(g):
        full = np.zeros_like(x.data)
        full[hi] = g
        return (full,)

    return make_node(x.data[lo], (x,), grad_lo), make_node(x.data[hi], (x,), grad_hi)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: (N, g, C/g, H, W) -> transpose -> flatten."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError("channel_shuffle", "C", c, "groups", groups)
    per = c // groups
    out = x.data.reshape(n, groups, per, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)

    def grad_fn(g):
        return (g.reshape(n, per, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w),)

    return make_node(out, (x,), grad_fn)


# --------------------------------------------------------------------------
# losses


def _check_labels(labels: np.ndarray, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("cross_entropy", "labels.N", labels.shape[0] if labels.ndim else 0, "logits.N", n)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = int(labels[(labels < 0) | (labels >= classes)][0])
        raise TamNasError(f"label {bad} outside [0, {classes})")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    n, classes = logits.shape
    labels = _check_labels(labels, n, classes)
    logp = _log_softmax64(logits.data, 1)
    rows = np.arange(n)
    value = -logp[rows, labels].mean()
    out = np.asarray(max(value, 0.0), dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return make_node(out, (logits,), grad_fn)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q))."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError("kl_divergence", "p.shape", p_logits.shape, "q.shape", q_logits.shape)
    n = p_logits.shape[0]
    lp = _log_softmax64(p_logits.data, 1)
    lq = _log_softmax64(q_logits.data, 1)
    p = np.exp(lp)
    rows = (p * (lp - lq)).sum(axis=1)
    out = np.asarray(max(rows.mean(), 0.0), dtype=p_logits.dtype)

    def grad_fn(g):
        scale_ = float(g) / n
        gp = gq = None
        if p_logits.requires_grad:
            gp = (p * ((lp - lq) - rows[:, None]) * scale_).astype(p_logits.dtype)
        if q_logits.requires_grad:
            gq = ((np.exp(lq) - p) * scale_).astype(q_logits.dtype)
        return gp, gq

    return make_node(out, (p_logits, q_logits), grad_fn)
