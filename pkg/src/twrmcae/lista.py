"""Learned iterative shrinkage (LISTA) layers and the cascaded stack.

One layer computes::

    z = deconv( F_theta( S f + W_e f ) ),   f = fragments( conv(x) )

where fragments are non-overlapping ``patch x patch`` tiles of every channel
(``patch=None`` uses the whole channel plane), ``S = I - W_d^T W_d`` and
``W_e = pinv(W_d) / L`` with ``L = ||W_d||_2^2``.  Layer params::

    theta ()  W_d (n, n)  conv_w (C, C, 3, 3)  conv_b (C)  deconv_w (C, C, 3, 3)  deconv_b (C)
    S (n, n)                                   only when ``untied_S`` is set
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError
from .nn import (
    conv2d_backward,
    conv2d_forward,
    conv_transpose2d_backward,
    conv_transpose2d_forward,
    identity_kernel,
)


@dataclass(frozen=True)
class ListaConfig:
    n_layers: int = 12
    patch: int | None = 8
    paper_literal: bool = False  # use |x - theta| sgn(x) instead of the canonical soft threshold
    encoder: str = "pinv"  # "pinv" or "transpose" (classical (1/L) W_d^T)
    untied_S: bool = False

    def __post_init__(self):
        if self.encoder not in ("pinv", "transpose"):
            raise ValueError(f"encoder must be 'pinv' or 'transpose', got {self.encoder!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    def fragment_dim(self, h: int, w: int) -> int:
        return h * w if self.patch is None else self.patch * self.patch


def soft_threshold(x, theta, paper_literal: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if paper_literal:
        return np.abs(x - theta) * np.sign(x)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def _soft_threshold_grads(g, theta, paper_literal):
    """Partial derivatives of the shrinkage wrt its input and wrt theta (subgradient 0 at kinks)."""
    sg = np.sign(g)
    if paper_literal:
        d = np.sign(g - theta) * sg
        return d, -d
    active = np.abs(g) > theta
    return active.astype(np.float64), -sg * active


# --------------------------------------------------------------------------- fragments


def to_fragments(y: np.ndarray, patch: int | None) -> np.ndarray:
    """(B, C, H, W) -> (B, C, n_frag, n) row-major tiles."""
    B, C, H, W = y.shape
    if patch is None:
        return y.reshape(B, C, 1, H * W)
    if H % patch or W % patch:
        raise ShapeError(f"{H}x{W} plane does not tile into {patch}x{patch} fragments")
    t = y.reshape(B, C, H // patch, patch, W // patch, patch).transpose(0, 1, 2, 4, 3, 5)
    return t.reshape(B, C, (H // patch) * (W // patch), patch * patch)


def from_fragments(f: np.ndarray, shape: tuple, patch: int | None) -> np.ndarray:
    B, C, H, W = shape
    if patch is None:
        return f.reshape(B, C, H, W)
    t = f.reshape(B, C, H // patch, W // patch, patch, patch).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(t.reshape(B, C, H, W))


# --------------------------------------------------------------------------- dictionary maps


def encoder_matrices(p: dict, cfg: ListaConfig):
    """Return ``(S, W_e, aux)``; ``aux`` carries what the backward pass needs."""
    wd = p["W_d"]
    n = wd.shape[0]
    u, s, vt = np.linalg.svd(wd)
    L = s[0] ** 2
    if L == 0.0:
        raise FloatingPointError("W_d is the zero matrix; the LISTA step size 1/L is undefined")
    if cfg.encoder == "pinv":
        cutoff = s[0] * max(wd.shape) * np.finfo(np.float64).eps
        inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
        pinv = (vt.T * inv_s) @ u.T
        we = pinv / L
    else:
        pinv = None
        we = wd.T / L
    S = p["S"] if cfg.untied_S else np.eye(n) - wd.T @ wd
    return S, we, {"u1": u[:, 0], "v1": vt[0], "s1": s[0], "L": L, "pinv": pinv}


def spectral_gap(wd: np.ndarray) -> float:
    """``sigma_1 - sigma_2`` of ``W_d``; ``||W_d||^2`` has a kink where it is zero."""
    s = np.linalg.svd(wd, compute_uv=False)
    return float(s[0] - s[1]) if len(s) > 1 else np.inf


def lift_top_singular(wd: np.ndarray, gap: float) -> np.ndarray:
    """Raise ``sigma_1`` along its own singular pair until it clears ``sigma_2`` by ``gap``."""
    u, s, vt = np.linalg.svd(wd)
    if len(s) < 2 or s[0] - s[1] >= gap:
        return wd
    return wd + (s[1] + gap - s[0]) * np.outer(u[:, 0], vt[0])


def _encoder_backward(dS, dWe, p, cfg, aux):
    """Fold gradients on S and W_e back onto the free parameters."""
    wd = p["W_d"]
    n = wd.shape[0]
    L = aux["L"]
    g = {}
    if cfg.untied_S:
        g["S"] = dS
        dwd = np.zeros_like(wd)
    else:
        dwd = -wd @ (dS + dS.T)
    if cfg.encoder == "pinv":
        P = aux["pinv"]
        dP = dWe / L
        dL = -np.sum(dWe * P) / L**2
        eye = np.eye(n)
        dwd = dwd - P.T @ dP @ P.T
        dwd = dwd + (eye - wd @ P) @ dP.T @ P @ P.T + P.T @ P @ dP.T @ (eye - P @ wd)
    else:
        dwd = dwd + dWe.T / L
        dL = -np.sum(dWe * wd.T) / L**2
    # d(s1^2)/dW_d = 2 s1 u1 v1^T
    dwd = dwd + dL * 2.0 * aux["s1"] * np.outer(aux["u1"], aux["v1"])
    g["W_d"] = dwd
    return g


# --------------------------------------------------------------------------- one layer


def init_lista_layer(
    rng: np.random.Generator | None,
    channels: int,
    n: int,
    cfg: ListaConfig = ListaConfig(),
    identity: bool = False,
    noise: float = 0.01,
    theta: float = 0.01,
) -> dict:
    """Identity-anchored init; ``identity=True`` gives the exact identity layer (theta 0, no noise)."""
    scale = 0.0 if identity or rng is None else noise

    def jitter(shape, gain=1.0):
        return scale * gain * rng.standard_normal(shape) if scale else np.zeros(shape)

    p = {
        "theta": np.array(0.0 if identity else float(theta)),
        # entries ~ N(0, noise^2 / n) keep ||W_d - I|| near 2 * noise at any
        # fragment size, so 1 / ||W_d||^2 does not drain the signal layer by layer
        "W_d": np.eye(n) + jitter((n, n), 1.0 / np.sqrt(n)),
        "conv_w": identity_kernel(channels) + jitter((channels, channels, 3, 3)),
        "conv_b": np.zeros(channels),
        "deconv_w": identity_kernel(channels) + jitter((channels, channels, 3, 3)),
        "deconv_b": np.zeros(channels),
    }
    if cfg.untied_S:
        p["S"] = np.eye(n) - p["W_d"].T @ p["W_d"]
    return p


def lista_layer_forward(x: np.ndarray, p: dict, cfg: ListaConfig = ListaConfig()):
    B, C, H, W = x.shape
    n = cfg.fragment_dim(H, W)
    if p["W_d"].shape != (n, n):
        raise ShapeError(f"W_d is {p['W_d'].shape}, fragments have dimension {n}")
    y, conv_cache = conv2d_forward(x, p["conv_w"], p["conv_b"], stride=1, pad=1)
    f = to_fragments(y, cfg.patch)
    S, we, aux = encoder_matrices(p, cfg)
    g = f @ S.T + f @ we.T
    theta = float(p["theta"])
    h = soft_threshold(g, theta, cfg.paper_literal)
    out, deconv_cache = conv_transpose2d_forward(from_fragments(h, x.shape, cfg.patch), p["deconv_w"], p["deconv_b"], pad=1)
    cache = {"conv": conv_cache, "deconv": deconv_cache, "f": f, "g": g, "S": S, "we": we, "aux": aux, "shape": x.shape}
    return out, cache


def lista_layer_backward(dout: np.ndarray, p: dict, cache: dict, cfg: ListaConfig = ListaConfig()):
    dhy, g_dw, g_db = conv_transpose2d_backward(dout, cache["deconv"])
    dh = to_fragments(dhy, cfg.patch)
    dgate, dtheta_elem = _soft_threshold_grads(cache["g"], float(p["theta"]), cfg.paper_literal)
    dg = dh * dgate
    n = dg.shape[-1]
    f2 = cache["f"].reshape(-1, n)
    dg2 = dg.reshape(-1, n)
    gram = dg2.T @ f2  # shared by S and W_e
    grads = _encoder_backward(gram, gram, p, cfg, cache["aux"])
    df = dg @ cache["S"] + dg @ cache["we"]
    dy = from_fragments(df, cache["shape"], cfg.patch)
    dx, g_cw, g_cb = conv2d_backward(dy, cache["conv"])
    grads["theta"] = np.array(np.sum(dh * dtheta_elem))
    grads.update(conv_w=g_cw, conv_b=g_cb, deconv_w=g_dw, deconv_b=g_db)
    return dx, grads


# --------------------------------------------------------------------------- stack


def init_lista_stack(
    rng: np.random.Generator | None,
    channels: int,
    n: int,
    cfg: ListaConfig = ListaConfig(),
    identity: bool = False,
    **kw,
) -> list[dict]:
    return [init_lista_layer(rng, channels, n, cfg, identity=identity, **kw) for _ in range(cfg.n_layers)]


def lista_stack_forward(x: np.ndarray, layers: list[dict], inject: np.ndarray | None = None, cfg: ListaConfig = ListaConfig()):
    """Run the cascade; returns ``(z, taps, cache)`` with ``taps[j]`` the output of layer j+1.

    When ``inject`` is given, the input of layer j+1 is ``taps[j] * inject``.
    """
    if inject is not None and inject.shape != x.shape:
        raise ShapeError(f"inject map {inject.shape} does not match input {x.shape}")
    taps, caches = [], []
    cur = x
    for j, p in enumerate(layers):
        z, c = lista_layer_forward(cur, p, cfg)
        taps.append(z)
        caches.append(c)
        if j + 1 < len(layers):
            cur = z * inject if inject is not None else z
    return taps[-1], taps, {"layers": caches, "taps": taps, "inject": inject}


def lista_stack_backward(dz, dtaps, layers: list[dict], cache: dict, cfg: ListaConfig = ListaConfig()):
    """Gradients of a scalar whose partials on ``z`` and every tap are given.

    ``dz`` or any entry of ``dtaps`` may be ``None``.  Returns
    ``(dx, layer_grads, dinject)``; ``dinject`` is ``None`` without injection.
    """
    taps, inject = cache["taps"], cache["inject"]
    nl = len(layers)
    dtaps = list(dtaps) if dtaps is not None else [None] * nl
    grads = [None] * nl
    dinject = np.zeros_like(taps[0]) if inject is not None else None
    carry = np.zeros_like(taps[-1]) if dz is None else np.array(dz, dtype=np.float64)
    for j in range(nl - 1, -1, -1):
        if dtaps[j] is not None:
            carry = carry + dtaps[j]
        dx, grads[j] = lista_layer_backward(carry, layers[j], cache["layers"][j], cfg)
        if j == 0:
            return dx, grads, dinject
        if inject is not None:
            dinject += dx * taps[j - 1]
            carry = dx * inject
        else:
            carry = dx
    raise AssertionError("unreachable")
