"""Layer primitives with hand-written reverse mode.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
``(dout, cache)``.  Arrays are float64, batch-first ``(B, C, H, W)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError


# --------------------------------------------------------------------------- elementwise


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(dout, mask):
    return dout * mask


# --------------------------------------------------------------------------- resize


@lru_cache(maxsize=64)
def _resize_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"cannot resize {n_in} -> {n_out}")
    scale = n_in / n_out
    support = max(scale, 1.0)
    centres = (np.arange(n_out) + 0.5) * scale
    src = np.arange(n_in) + 0.5
    w = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centres[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` bilinear (triangle-filter) resampling matrix.

    Pixel centres are aligned (half-pixel convention).  When shrinking, the
    triangle is widened by the scale factor so every input pixel contributes,
    as PIL's bilinear resize does; when enlarging this is ordinary bilinear
    interpolation with edge clamping.  Rows sum to one, so constants are kept.
    """
    return _resize_matrix_cached(int(n_in), int(n_out))


def resize2d(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize the last two axes of ``x`` to ``(h, w)``."""
    rh = resize_matrix(x.shape[-2], h)
    rw = resize_matrix(x.shape[-1], w)
    return np.matmul(np.matmul(rh, x), rw.T)


def resize2d_backward(dout: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    rh = resize_matrix(in_hw[0], dout.shape[-2])
    rw = resize_matrix(in_hw[1], dout.shape[-1])
    return np.matmul(np.matmul(rh.T, dout), rw)


# --------------------------------------------------------------------------- convolution


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, kh, kw, stride, Ho, Wo):
    B, Ci = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, Ho, Wo, Ci, kh, kw) -> rows of receptive fields
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Ci * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation ``(B,Ci,H,W) * (Co,Ci,kh,kw) + b -> (B,Co,Ho,Wo)``."""
    B, Ci, H, W = x.shape
    Co, Ci2, kh, kw = w.shape
    if Ci != Ci2:
        raise ShapeError(f"conv2d: input has {Ci} channels, kernel expects {Ci2}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = _pad(x, pad)
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    out = cols @ w.reshape(Co, -1).T + b
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    # keep the padded input, not the (much larger) column matrix
    return np.ascontiguousarray(out), (xp, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache):
    xp, w, stride, pad = cache
    B, Ci, Hp, Wp = xp.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2:]
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, Co)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    del cols
    dcols = (d2 @ w.reshape(Co, -1)).reshape(B, Ho, Wo, Ci, kh, kw)
    dxp = np.zeros((B, Ci, Hp, Wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv_transpose2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 1):
    """Stride-1 transposed convolution with kernel ``(Ci, Co, kh, kw)``.

    It is the adjoint of :func:`conv2d_forward` with the same kernel and padding,
    so a 3x3 kernel with ``pad=1`` preserves the spatial size.
    """
    Ci, Co, kh, kw = w.shape
    if x.shape[1] != Ci:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {Ci}")
    # adjoint of correlation == correlation with the spatially flipped, channel-swapped kernel
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out, inner = conv2d_forward(x, wf, b, stride=1, pad=kh - 1 - pad)
    return out, (inner, w.shape)


def conv_transpose2d_backward(dout, cache):
    inner, w_shape = cache
    dx, dwf, db = conv2d_backward(dout, inner)
    dw = dwf.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    return dx, np.ascontiguousarray(dw), db


def identity_kernel(c: int, k: int = 3) -> np.ndarray:
    w = np.zeros((c, c, k, k))
    for i in range(c):
        w[i, i, k // 2, k // 2] = 1.0
    return w


# --------------------------------------------------------------------------- pooling


def maxpool_forward(x: np.ndarray, k: int = 3, stride: int = 2):
    """Max pooling, no padding; ties resolve to the first index in row-major window order."""
    B, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool {k}x{k} does not fit a {H}x{W} map")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride)


def maxpool_backward(dout, cache):
    x_shape, arg, k, stride = cache
    B, C, H, W = x_shape
    Ho, Wo = arg.shape[2:]
    rows = (np.arange(Ho) * stride)[:, None] + arg // k
    cols = (np.arange(Wo) * stride)[None, :] + arg % k
    dx = np.zeros(x_shape)
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    np.add.at(dx, (bi, ci, rows, cols), dout)
    return dx


# --------------------------------------------------------------------------- dense


def linear_forward(x, w, b):
    """``x (B, n_in) @ w.T (n_in, n_out) + b``."""
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
