"""Coordinate attention: per-axis average pooling, shared 1x1 mixing, batch norm,
sigmoid, per-axis 1x1 expansion and sigmoid gates multiplied back onto the input.

Parameters are a flat ``dict`` of arrays::

    mix_w (Cr, C)  mix_b (Cr)      shared squeeze over the concatenated pooled axis
    bn_gamma (Cr)  bn_beta (Cr)    batch-norm affine
    h_w (C, Cr)    h_b (C)         row (range / Doppler) gate
    w_w (C, Cr)    w_b (C)         column (slow time) gate
    bn_running_mean, bn_running_var  buffers, not trained

with ``Cr = C // k_r``.
"""

from __future__ import annotations

import numpy as np

from .core import ShapeError
from .nn import sigmoid, uniform_init

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BUFFERS = ("bn_running_mean", "bn_running_var")


def init_attention(rng: np.random.Generator, channels: int = 3, k_r: int = 3, gate_bias: float = 0.0) -> dict:
    if channels % k_r:
        raise ValueError(f"channels ({channels}) must be divisible by k_r ({k_r})")
    cr = channels // k_r
    return {
        "mix_w": uniform_init(rng, (cr, channels), channels),
        "mix_b": np.zeros(cr),
        "bn_gamma": np.ones(cr),
        "bn_beta": np.zeros(cr),
        "h_w": uniform_init(rng, (channels, cr), cr),
        "h_b": np.full(channels, float(gate_bias)),
        "w_w": uniform_init(rng, (channels, cr), cr),
        "w_b": np.full(channels, float(gate_bias)),
        "bn_running_mean": np.zeros(cr),
        "bn_running_var": np.ones(cr),
    }


def coord_pool(x: np.ndarray):
    """Row means ``(..., C, H)`` and column means ``(..., C, W)`` of ``(..., C, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError("coord_pool needs H, W >= 1")
    return x.mean(axis=-1), x.mean(axis=-2)


def coord_attention_forward(x: np.ndarray, p: dict, mode: str = "train"):
    """Gate ``x`` (B, C, H, W); returns ``(out, cache)``.

    ``cache["a_h"]``/``cache["a_w"]`` hold the two attention maps and, in train
    mode, ``cache["batch_mean"]``/``cache["batch_var"]`` the statistics used.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    B, C, H, W = x.shape
    if p["mix_w"].shape[1] != C:
        raise ShapeError(f"attention params expect {p['mix_w'].shape[1]} channels, input has {C}")
    zh, zw = coord_pool(x)
    y = np.concatenate([zh, zw], axis=2)  # (B, C, H+W)
    m = np.einsum("rc,bcl->brl", p["mix_w"], y) + p["mix_b"][None, :, None]
    if mode == "train":
        mu = m.mean(axis=(0, 2))
        var = m.var(axis=(0, 2))
    else:
        mu, var = p["bn_running_mean"], p["bn_running_var"]
    std = np.sqrt(var + BN_EPS)
    xhat = (m - mu[None, :, None]) / std[None, :, None]
    s = sigmoid(p["bn_gamma"][None, :, None] * xhat + p["bn_beta"][None, :, None])
    sh, sw = s[..., :H], s[..., H:]
    a_h = sigmoid(np.einsum("cr,brh->bch", p["h_w"], sh) + p["h_b"][None, :, None])
    a_w = sigmoid(np.einsum("cr,brw->bcw", p["w_w"], sw) + p["w_b"][None, :, None])
    out = x * a_h[..., :, None] * a_w[..., None, :]
    cache = {
        "x": x, "y": y, "xhat": xhat, "std": std, "s": s, "a_h": a_h, "a_w": a_w,
        "mode": mode, "n_stat": B * (H + W),
    }
    if mode == "train":
        cache["batch_mean"], cache["batch_var"] = mu, var
    return out, cache


def coord_attention_backward(dout: np.ndarray, p: dict, cache: dict):
    """Reverse mode of :func:`coord_attention_forward`; returns ``(dx, grads)``."""
    x, y, xhat, std, s = cache["x"], cache["y"], cache["xhat"], cache["std"], cache["s"]
    a_h, a_w = cache["a_h"], cache["a_w"]
    H, W = x.shape[2:]
    g = {}
    dx = dout * a_h[..., :, None] * a_w[..., None, :]
    dxa = dout * x
    da_h = np.einsum("bchw,bcw->bch", dxa, a_w)
    da_w = np.einsum("bchw,bch->bcw", dxa, a_h)
    dph = da_h * a_h * (1.0 - a_h)
    dpw = da_w * a_w * (1.0 - a_w)
    sh, sw = s[..., :H], s[..., H:]
    g["h_w"] = np.einsum("bch,brh->cr", dph, sh)
    g["h_b"] = dph.sum(axis=(0, 2))
    g["w_w"] = np.einsum("bcw,brw->cr", dpw, sw)
    g["w_b"] = dpw.sum(axis=(0, 2))
    ds = np.concatenate([np.einsum("cr,bch->brh", p["h_w"], dph), np.einsum("cr,bcw->brw", p["w_w"], dpw)], axis=2)
    dbn = ds * s * (1.0 - s)
    g["bn_gamma"] = (dbn * xhat).sum(axis=(0, 2))
    g["bn_beta"] = dbn.sum(axis=(0, 2))
    dxhat = dbn * p["bn_gamma"][None, :, None]
    if cache["mode"] == "train":
        n = cache["n_stat"]
        dm = (
            n * dxhat
            - dxhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        ) / (n * std[None, :, None])
    else:
        dm = dxhat / std[None, :, None]
    g["mix_w"] = np.einsum("brl,bcl->rc", dm, y)
    g["mix_b"] = dm.sum(axis=(0, 2))
    dy = np.einsum("rc,brl->bcl", p["mix_w"], dm)
    dx = dx + dy[..., :H, None] / W + dy[:, :, None, H:] / H
    return dx, g


def update_running_stats(p: dict, cache: dict, momentum: float = BN_MOMENTUM) -> None:
    """Fold a train-mode batch's statistics into the running buffers (in place)."""
    n = cache["n_stat"]
    unbiased = cache["batch_var"] * n / max(n - 1, 1)
    p["bn_running_mean"] = (1 - momentum) * p["bn_running_mean"] + momentum * cache["batch_mean"]
    p["bn_running_var"] = (1 - momentum) * p["bn_running_var"] + momentum * unbiased
