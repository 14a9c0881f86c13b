"""Network primitives on top of :mod:`fflocal.tensor`.

Layouts are NCHW throughout. Convolutions lower to a single matmul via
im2col; losses accumulate in float64 and return float64 scalars.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, _sigmoid


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation of ``x [N,C,H,W]`` with ``w [F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise(x, w, b)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (gm.T @ cols).reshape(w.shape)
        db = gm.sum(axis=0) if b is not None else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "conv2d")


def _pointwise(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    # 1x1 conv as a batched matmul in NCHW, no im2col copy
    n, c, h, wd = x.shape
    f = w.shape[0]
    x3 = x.data.reshape(n, c, h * wd)
    wmat = w.data.reshape(f, c)
    out = np.matmul(wmat, x3)
    if b is not None:
        out += b.data[:, None]

    def back(g):
        g3 = g.reshape(n, f, h * wd)
        dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(w.shape)
        db = g3.sum(axis=(0, 2)) if b is not None else None
        dx = np.matmul(wmat.T, g3).reshape(x.shape) if x.requires_grad else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out.reshape(n, f, h, wd), parents, back, "conv2d")


def landmark_conv2d(
    points: np.ndarray,
    w: Tensor,
    b: Tensor | None,
    size: tuple[int, int],
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """``conv2d`` applied to one-hot landmark maps, given only the hot pixels.

    ``points`` is an integer array ``[N,K,2]`` of in-frame ``(x, y)`` pixel
    positions, one per channel. The result equals
    ``conv2d(maps, w, b, stride, padding)`` where ``maps[n,k]`` is zero except
    for a single one at ``points[n,k]``, at a fraction of the cost.
    """
    points = np.asarray(points)
    n, k = points.shape[:2]
    f, kc, kh, kw = w.shape
    if kc != k:
        raise ShapeError(f"landmark_conv2d: {k} landmarks incompatible with kernel {w.shape}")
    h, wd = size
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    px = points[..., 0].astype(np.int64)
    py = points[..., 1].astype(np.int64)
    ii, jj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    # output (y, x) sees the hot pixel through tap (i, j) iff stride*y + i - padding == py
    ny = py[:, :, None, None] + padding - ii[None, None]
    nx = px[:, :, None, None] + padding - jj[None, None]
    valid = (ny % stride == 0) & (nx % stride == 0)
    oy, ox = ny // stride, nx // stride
    valid &= (oy >= 0) & (oy < ho) & (ox >= 0) & (ox < wo)
    nn_, kk, ti, tj = np.nonzero(valid)
    flat_out = (nn_ * ho + oy[valid]) * wo + ox[valid]
    tap = (kk * kh + ti) * kw + tj
    wtaps = w.data.transpose(1, 2, 3, 0).reshape(k * kh * kw, f)
    out = np.zeros((n * ho * wo, f), dtype=w.dtype)
    np.add.at(out, flat_out, wtaps[tap])
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dtaps = np.zeros((k * kh * kw, f), dtype=g.dtype)
        np.add.at(dtaps, tap, gm[flat_out])
        dw = dtaps.reshape(k, kh, kw, f).transpose(3, 0, 1, 2)
        if b is None:
            return (dw,)
        return (dw, gm.sum(axis=0))

    parents = (w, b) if b is not None else (w,)
    return _make(out, parents, back, "landmark_conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel stride-1 convolution; ``w`` is ``[C,1,kh,kw]``."""
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw = w.shape[2:]
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    wd_ = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wd_[:, i, j][None, :, None, None] * xp[:, :, i:i + ho, j:j + wo]
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        dw = np.empty_like(w.data)
        dxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + ho, j:j + wo])
                if dxp is not None:
                    dxp[:, :, i:i + ho, j:j + wo] += wd_[:, i, j][None, :, None, None] * g
        dx = None
        if dxp is not None:
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "depthwise_conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Non-overlapping transposed convolution; ``w`` is ``[C,F,stride,stride]``.

    This is the adjoint of a stride-``stride`` convolution whose kernel equals
    its stride, so every input pixel paints its own ``stride x stride`` block.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} incompatible with kernel {w.shape}")
    c, f, kh, kw = w.shape
    if kh != stride or kw != stride:
        raise ShapeError(f"conv2d_transpose: kernel {w.shape} must be stride x stride ({stride})")
    n, _, h, wd = x.shape
    s = stride
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.data.reshape(c, f * s * s)
    out = (xm @ wm).reshape(n, h, wd, f, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(n, f, h * s, wd * s)
    if b is not None:
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def back(g):
        gm = g.reshape(n, f, h, s, wd, s).transpose(0, 2, 4, 1, 3, 5).reshape(-1, f * s * s)
        dw = (xm.T @ gm).reshape(w.shape)
        dx = (gm @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "conv2d_transpose")


def global_average_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]`` spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (h * wd))[:, :, None, None], x.shape).astype(x.dtype),)

    return _make(out, (x,), back, "global_average_pool")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer, ``x [N,D] @ w [D,M] + b [M]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        dx = g @ w.data.T if x.requires_grad else None
        dw = x.data.T @ g
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "dense")


def select_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick channel ``index[n]`` of sample ``n``: ``[N,K,H,W] -> [N,1,H,W]``."""
    index = np.asarray(index, dtype=np.int64)
    n, k = x.shape[:2]
    if index.shape != (n,) or np.any(index < 0) or np.any(index >= k):
        raise ShapeError(f"select_channel: index {index!r} invalid for {x.shape}")
    rows = np.arange(n)
    out = x.data[rows, index][:, None]

    def back(g):
        dx = np.zeros_like(x.data, dtype=g.dtype)
        dx[rows, index] = g[:, 0]
        return (dx,)

    return _make(out, (x,), back, "select_channel")


def channel_mix(x: Tensor, weights: Tensor, factor: float = 1.0) -> Tensor:
    """``factor * sum_k weights[n,k] * x[n,k]`` per pixel: ``[N,K,H,W] -> [N,1,H,W]``."""
    if x.ndim != 4 or weights.shape != x.shape[:2]:
        raise ShapeError(f"channel_mix: weights {weights.shape} incompatible with {x.shape}")
    xd, wd = x.data, weights.data
    out = factor * np.einsum("nkhw,nk->nhw", xd, wd)[:, None]

    def back(g):
        g0 = g[:, 0]
        dx = factor * wd[:, :, None, None] * g0[:, None] if x.requires_grad else None
        dw = factor * np.einsum("nhw,nkhw->nk", g0, xd) if weights.requires_grad else None
        return dx, dw

    return _make(out.astype(x.dtype), (x, weights), back, "channel_mix")


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]`` as a float64 scalar."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {target.shape[0]} targets for {n} rows")
    if np.any(target < 0) or np.any(target >= c):
        raise ValueError(f"softmax_cross_entropy: targets must lie in [0, {c}), got {target}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, target])

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1.0
        return ((g * p / n).astype(logits.dtype),)

    return _make(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def sigmoid_binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean elementwise binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_binary_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("sigmoid_binary_cross_entropy: targets must be 0 or 1")
    x = logits.data.astype(np.float64)
    t = t.astype(np.float64)
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))
    count = x.size

    def back(g):
        return ((g * (_sigmoid(x) - t) / count).astype(logits.dtype),)

    return _make(np.asarray(loss), (logits,), back, "sigmoid_binary_cross_entropy")
