"""Differentiable primitives on NCHW (or C×H×W) float arrays.

Every function takes and returns :class:`Tensor`; when grad mode is on and
any input requires grad, the output carries a backward closure. Layers that
accept a single image (C×H×W) also accept a batch (B×C×H×W).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, _grad_enabled


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype, _view=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), _backward, "mul")


def square(x: Tensor) -> Tensor:
    def _backward(g):
        x._accumulate(2.0 * x.data * g)

    return Tensor._make(x.data * x.data, (x,), _backward, "square")


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def _backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), _backward, "silu")


# -- reductions and shape ------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._make(out, (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return Tensor._make(out, (x,), _backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def _backward(g):
        x._accumulate(g.reshape(x.shape))

    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), _backward, "reshape", view=np.may_share_memory(out, x.data))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def _backward(g):
        x._accumulate(np.transpose(g, inv))

    return Tensor._make(np.transpose(x.data, axes), (x,), _backward, "transpose", view=True)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                        _backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), _backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), _backward, "softmax")


# -- layers ----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            weight._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor._make(out, parents, _backward, "linear")


def _as_batch(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected C×H×W or B×C×H×W, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (C_out×C_in×k×k) plus bias."""
    xb, squeeze = _as_batch(x)
    B, C, H, W = xb.shape
    Co, Ci, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {weight.shape}")
    if Ci != C:
        raise ValueError(f"input has {C} channels but weight expects {Ci}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if (H + 2 * padding - k) % stride or (W + 2 * padding - k) % stride:
        raise ValueError(f"output size not integral for H={H}, W={W}, k={k}, "
                         f"stride={stride}, padding={padding}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    pointwise = k == 1 and stride == 1 and padding == 0
    # channel-last im2col: cols[b, y, x, dy, dx, c]; weight laid out to match
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(Co, -1)
    xh = xb.data.transpose(0, 2, 3, 1)
    if pointwise:
        cols = np.ascontiguousarray(xh).reshape(-1, C)
    else:
        if padding:
            xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=xh.dtype)
            xp[:, padding:padding + H, padding:padding + W, :] = xh
        else:
            xp = xh
        cols = np.empty((B, Ho, Wo, k, k, C), dtype=xh.dtype)
        for dy in range(k):
            for dx in range(k):
                cols[:, :, :, dy, dx, :] = xp[:, dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride, :]
        del xp
        cols = cols.reshape(B * Ho * Wo, k * k * C)
    del xh
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    parents = (xb, weight) if bias is None else (xb, weight, bias)
    if not _grad_enabled() or not (weight.requires_grad or xb.requires_grad):
        del cols

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(Co, k, k, C).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if xb.requires_grad:
            dcols = g2 @ w2
            if pointwise:
                xb._accumulate(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
                return
            dcols = dcols.reshape(B, Ho, Wo, k, k, C)
            dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
            for dy in range(k):
                for dx in range(k):
                    dxp[:, dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride, :] += dcols[:, :, :, dy, dx, :]
            xb._accumulate(dxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2))

    y = Tensor._make(out, parents, _backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def block_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Exact means over non-overlapping ``window``×``window`` blocks of the last two axes.

    Accumulates in float64 and returns the input dtype (float64 for integer input).
    """
    *lead, H, W = x.shape
    if window < 1 or H % window or W % window:
        raise ValueError(f"window {window} does not divide spatial shape {(H, W)}")
    blocks = x.reshape(*lead, H // window, window, W // window, window)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(dtype, copy=False)


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    out = block_mean(x.data, window)

    def _backward(g):
        up = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1)
        x._accumulate(up / (window * window))

    return Tensor._make(out, (x,), _backward, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def _backward(g):
        *lead, H, W = g.shape
        x._accumulate(g.reshape(*lead, H // factor, factor, W // factor, factor).sum(axis=(-3, -1)))

    return Tensor._make(out, (x,), _backward, "upsample_nearest")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) with per-channel affine."""
    xb, squeeze = _as_batch(x)
    B, C, H, W = xb.shape
    if C % groups:
        raise ValueError(f"{groups} groups do not divide {C} channels")
    xg = xb.data.reshape(B, groups, -1)
    # statistics accumulate in float64; the normalized values stay in the input dtype
    mu = xg.mean(axis=2, keepdims=True, dtype=np.float64).astype(xb.dtype)
    d = xg - mu
    var = (d * d).mean(axis=2, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xb.dtype)
    xhat = (d * inv).reshape(B, C, H, W)
    del d
    g4 = gamma.data.reshape(1, C, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def _backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if xb.requires_grad:
            gx = (g * g4).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            m = gx.shape[2]
            dx = (inv / m) * (m * gx - gx.sum(axis=2, keepdims=True)
                              - xh * (gx * xh).sum(axis=2, keepdims=True))
            xb._accumulate(dx.reshape(B, C, H, W).astype(xb.dtype, copy=False))

    y = Tensor._make(out, (xb, gamma, beta), _backward, "group_norm")
    return reshape(y, y.shape[1:]) if squeeze else y


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   bq: Tensor | None = None, bk: Tensor | None = None,
                   bv: Tensor | None = None, bo: Tensor | None = None,
                   return_weights: bool = False):
    """Single-head scaled dot-product attention over positions.

    ``x`` is C×L or B×C×L (or B×C×H×W, flattened to L = H·W). Projections are
    C×C weights applied along the channel axis. Returns a tensor shaped like
    ``x``; with ``return_weights`` also the L×L (per batch) attention matrix.
    """
    shape = x.shape
    if x.ndim == 2:
        xb = reshape(x, (1,) + shape)
    elif x.ndim == 3:
        xb = x
    elif x.ndim == 4:
        xb = reshape(x, (shape[0], shape[1], shape[2] * shape[3]))
    else:
        raise ValueError(f"unsupported attention input shape {shape}")
    if xb.shape[2] < 1:
        raise ValueError("attention needs at least one position")
    C = xb.shape[1]
    seq = transpose(xb, (0, 2, 1))  # B, L, C
    q = linear(seq, wq, bq)
    k = linear(seq, wk, bk)
    v = linear(seq, wv, bv)
    del seq
    scores = matmul(q, transpose(k, (0, 2, 1)))
    del q, k
    scores = mul(scores, 1.0 / math.sqrt(C))
    weights = softmax(scores, axis=-1)
    del scores
    h = matmul(weights, v)
    del v
    out = linear(h, wo, bo)
    del h
    out = reshape(transpose(out, (0, 2, 1)), shape)
    if return_weights:
        return out, weights
    return out


def mse(pred: Tensor, target) -> Tensor:
    return mean(square(sub(pred, target)))
