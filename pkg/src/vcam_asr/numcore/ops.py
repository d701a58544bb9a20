"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and registers a backward
closure through :func:`make_result`. Broadcasting is limited to adding a
bias whose shape equals the trailing extents of the other operand.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, ShapeError, Tensor, default_dtype, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, dtype=None) -> Tensor:
    return Tensor(x, dtype=dtype or default_dtype())


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing extents of ``a`` (bias)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract {b.shape} from {a.shape}")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def log1p(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log1p(x), (a,), lambda g: (g / (1.0 + x),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_result(out.astype(x.dtype), (a,), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return make_result(a.data * keep, (a,), lambda g: (g * keep,))


# -- reductions ------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Tensor) -> Tensor:
    """log-sum-exp over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    return make_result(out, (a,), lambda g: (g[..., None] * (e / s),))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., M, K); ``b`` is either (K, N), shared across the leading
    axes, or (..., K, N) with the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"cannot concatenate {tensors[0].shape} with {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                       lambda g: tuple(np.split(g, cuts, axis=ax)))


def _is_basic(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in items)


def index(a: Tensor, key) -> Tensor:
    """``a[key]`` with scatter-add backward."""
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(key)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[key] += g
        else:
            np.add.at(z, key, g)
        return (z,)

    return make_result(np.ascontiguousarray(a.data[key]), (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    shape = table.shape

    def bw(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (z,)

    return make_result(table.data[ids], (table,), bw)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """(B, T, J) + (B, U, J) -> (B, T, U, J): every frame paired with every label state."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"outer_add expects (B,T,J) and (B,U,J), got {a.shape}, {b.shape}")
    out = a.data[:, :, None, :] + b.data[:, None, :, :]
    return make_result(out, (a, b), lambda g: (g.sum(axis=2), g.sum(axis=1)))


# -- normalisation ---------------------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks entries that take part;
    masked-out entries get probability zero.
    """
    xd = x.data
    _check_finite(xd, "softmax input")
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    s = np.where(s > 0, s, 1.0)
    p = (e / s).astype(x.dtype)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd, "log_softmax input")
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return make_result(out.astype(xd.dtype), (x, gain, bias), bw)


# -- convolutions ----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Spatial convolution of NHWC images with a (kh, kw, C_in, C_out) kernel."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"kernel expects {cin} channels, input has {c}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def bw(g):
        gm = g.reshape(-1, cout)
        gw = (cols.T @ gm).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # spatial-major layout keeps each strided add over contiguous (N*C) runs
            gt = np.ascontiguousarray(g.transpose(1, 2, 0, 3))
            gxp = np.zeros((xp.shape[1], xp.shape[2], n, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += gt @ w.data[i, j].T
            gx = np.ascontiguousarray(gxp[pad:pad + h, pad:pad + wd].transpose(2, 0, 1, 3))
        return gx, gw

    return make_result(out, (x, w), bw)


def conv1d_time(x: Tensor, w: Tensor, pad: int = 0, stride: int = 1) -> Tensor:
    """Convolution along axis 1 of a (B, F, ..., C_in) tensor.

    ``w`` is (k, C_in, C_out); the kernel is shared over all middle axes.
    Output frame n is ``sum_i xpad[stride*n + i] @ w[i]``.
    """
    k, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"kernel expects {cin} channels, input has {x.shape[-1]}")
    f = x.shape[1]
    widths = [(0, 0)] * x.ndim
    widths[1] = (pad, pad)
    xp = np.pad(x.data, widths) if pad else x.data
    fo = (xp.shape[1] - k) // stride + 1
    if xp.shape[1] < k:
        raise ShapeError("sequence shorter than temporal kernel")
    wd = w.data
    span = stride * (fo - 1) + 1

    def tap(i):
        return xp[:, i:i + span:stride]

    out = tap(0) @ wd[0]
    for i in range(1, k):
        out += tap(i) @ wd[i]

    def bw(g):
        gw = None
        if w.requires_grad:
            gm = g.reshape(-1, cout)
            gw = np.stack([tap(i).reshape(-1, cin).T @ gm for i in range(k)])
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                gxp[:, i:i + span:stride] += g @ wd[i].T
            gx = gxp[:, pad:pad + f] if pad else gxp
        return gx, gw

    return make_result(out, (x, w), bw)


def conv_gather(table: Tensor, taps, w: Tensor) -> Tensor:
    """Convolution over sequences given as row indices into ``table``.

    ``taps`` is an (N, k) integer array; output row n is
    ``sum_i table[taps[n, i]] @ w[i]`` with ``w`` of shape (k, C_in, C_out).
    Equals ``conv1d_time`` when ``taps`` lists each output frame's input
    frames, but only distinct tap tuples need to be computed.
    """
    taps = np.asarray(taps, dtype=np.int64)
    k, cin, cout = w.shape
    if taps.ndim != 2 or taps.shape[1] != k:
        raise ShapeError(f"taps must be (N, {k}), got {taps.shape}")
    if table.shape[-1] != cin:
        raise ShapeError(f"kernel expects {cin} channels, table has {table.shape[-1]}")
    if taps.size and (taps.min() < 0 or taps.max() >= table.shape[0]):
        raise IndexError("tap index outside the table")
    td, wd = table.data, w.data
    out = td[taps[:, 0]] @ wd[0]
    for i in range(1, k):
        out += td[taps[:, i]] @ wd[i]

    def bw(g):
        gw = None
        if w.requires_grad:
            gm = g.reshape(-1, cout)
            gw = np.stack([td[taps[:, i]].reshape(-1, cin).T @ gm for i in range(k)])
        gt = None
        if table.requires_grad:
            gt = np.zeros(td.shape, dtype=g.dtype)
            for i in range(k):
                np.add.at(gt, taps[:, i], g @ wd[i].T)
        return gt, gw

    return make_result(out, (table, w), bw)
