"""Differentiable neural-network operations on top of the tensor engine.

Convolution is stride-1 with kernel size 1 (no padding) or 3 (pad 1), which
is all the block-structured extractor needs; both keep the spatial extent.
Batch normalization carries its running statistics as plain numpy buffers
owned by the caller, mutated only in train mode.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng
from .tensor import ShapeError, Tensor, _make, add_bias, matmul, transpose


def kaiming_uniform(rng: Rng, shape: tuple, fan_in: int) -> np.ndarray:
    """Kaiming-uniform fan-in init with ReLU gain: U(-b, b), b = sqrt(6/fan_in)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-d convolution, NCHW input, OCkk weight, stride 1.

    k=3 pads by 1, k=1 does not pad; output spatial size equals input.
    Implemented as im2col + one matmul; the column buffer is kept for the
    weight gradient and scattered back (9 shifted adds) for the input one.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects NCHW input and OCkk weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw} (input {x.shape}, weight {w.shape})")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
    k = kh

    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * wd, c * 9
        )
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = gmat.sum(axis=0) if b is not None else None
        gcols = gmat @ wmat
        if k == 1:
            gx = gcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        else:
            gxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
            gc = gcols.reshape(n, h, wd, c, 3, 3)
            for ki in range(3):
                for kj in range(3):
                    gxp[:, :, ki : ki + h, kj : kj + wd] += gc[..., ki, kj].transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, 1:-1, 1:-1]
        if b is not None:
            return np.ascontiguousarray(gx), gw, gb
        return np.ascontiguousarray(gx), gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first window element row-major."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extent must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first max in (0,0),(0,1),(1,0),(1,1) order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _make(out, (x,), bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W), NCHW layout.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place as
    running = (1 - momentum) * running + momentum * batch.
    Eval mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    cnt = n * h * w

    if mode == "train":
        if cnt <= 1:
            raise ValueError(
                f"batchnorm2d: degenerate statistics, only {cnt} value per channel in train mode"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "eval":
            gx = gxhat * invstd[None, :, None, None]
        else:
            # batch statistics depend on x: full train-mode backward
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (invstd[None, :, None, None] / cnt) * (cnt * gxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), bwd)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: expects BxC logits, got {logits.shape}")
    t = np.asarray(targets)
    bsz, ncls = logits.shape
    if t.shape != (bsz,):
        raise ShapeError(f"cross_entropy_logits: targets {t.shape} do not match batch {bsz}")
    if t.min() < 0 or t.max() >= ncls:
        raise IndexError(
            f"cross_entropy_logits: target out of range [0, {ncls}): {int(t.min())}..{int(t.max())}"
        )
    t = t.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(bsz)
    nll = np.log(e.sum(axis=1)) - z[rows, t]
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bwd(g):
        gl = p.copy()
        gl[rows, t] -= 1.0
        return (gl * (g / bsz),)

    return _make(loss, (logits,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T (+ b); w is (out_features, in_features)."""
    out = matmul(x, transpose(w))
    if b is not None:
        out = add_bias(out, b)
    return out


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis: x / max(||x||, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    r = np.maximum(norm, eps)
    y = x.data / r

    def bwd(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        gx = g / r
        live = norm > eps  # below eps the denominator is constant
        gx = gx - np.where(live, x.data * dot / (r * r * np.maximum(norm, eps)), 0.0)
        return (gx.astype(g.dtype, copy=False),)

    return _make(y, (x,), bwd)
