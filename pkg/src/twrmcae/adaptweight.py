"""Eight-layer AlexNet-shaped scoring CNN, link-weight normalisation and the
conv5 -> LISTA injection adapter.

Profiles
--------
``paper227``  227x227 input; conv1 96@11x11/4 -> 55x55, pool -> 27x27, conv2 256@5x5,
              pool -> 13, conv3/4 384@3x3, conv5 256@3x3, pool -> 6, fc 256 / 64 / 1.
``desk64``    64x64 input with conv widths divided by 4 and conv1 at stride 2, giving
              the same 27 -> 13 -> 6 spatial chain one stage later (27, 13, 6, 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError
from .nn import (
    conv2d_backward,
    conv2d_forward,
    linear_backward,
    linear_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    resize2d,
    resize2d_backward,
    sigmoid,
    softplus,
    uniform_init,
)

WEIGHT_EPS = 1e-9


@dataclass(frozen=True)
class ConvSpec:
    out: int
    kernel: int
    stride: int
    pad: int
    pool: bool


@dataclass(frozen=True)
class CnnProfile:
    name: str
    input_size: int
    convs: tuple[ConvSpec, ...]
    fc: tuple[int, ...] = (256, 64, 1)
    in_channels: int = 3

    def spatial_chain(self) -> list[int]:
        """Feature-map side after each conv (and its pool, if any)."""
        s, out = self.input_size, []
        for c in self.convs:
            s = (s + 2 * c.pad - c.kernel) // c.stride + 1
            if s < 1:
                raise ShapeError(f"profile {self.name}: conv collapses the map")
            if c.pool:
                s = (s - 3) // 2 + 1
                if s < 1:
                    raise ShapeError(f"profile {self.name}: pooling collapses the map")
            out.append(s)
        return out

    @property
    def flat_features(self) -> int:
        return self.convs[-1].out * self.spatial_chain()[-1] ** 2


PROFILES = {
    "paper227": CnnProfile(
        "paper227",
        227,
        (
            ConvSpec(96, 11, 4, 0, True),
            ConvSpec(256, 5, 1, 2, True),
            ConvSpec(384, 3, 1, 1, False),
            ConvSpec(384, 3, 1, 1, False),
            ConvSpec(256, 3, 1, 1, True),
        ),
    ),
    "desk64": CnnProfile(
        "desk64",
        64,
        (
            ConvSpec(24, 11, 2, 0, True),
            ConvSpec(64, 5, 1, 2, True),
            ConvSpec(96, 3, 1, 1, False),
            ConvSpec(96, 3, 1, 1, False),
            ConvSpec(64, 3, 1, 1, True),
        ),
    ),
}


def get_profile(profile: "str | CnnProfile") -> CnnProfile:
    if isinstance(profile, CnnProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown CNN profile {profile!r}; have {sorted(PROFILES)}") from None


def init_weight_cnn(
    rng: np.random.Generator, profile: "str | CnnProfile" = "desk64", channels: int = 3, inject_bias: float = 6.0
) -> dict:
    prof = get_profile(profile)
    p = {}
    cin = prof.in_channels
    for i, c in enumerate(prof.convs, start=1):
        fan = cin * c.kernel**2
        p[f"conv{i}_w"] = uniform_init(rng, (c.out, cin, c.kernel, c.kernel), fan)
        p[f"conv{i}_b"] = np.zeros(c.out)
        cin = c.out
    nin = prof.flat_features
    for i, width in enumerate(prof.fc, start=6):
        p[f"fc{i}_w"] = uniform_init(rng, (width, nin), nin)
        p[f"fc{i}_b"] = np.zeros(width)
        nin = width
    # zero projection: the injected gate starts spatially uniform at sigmoid(inject_bias)
    p["inject_w"] = np.zeros((channels, prof.convs[-1].out))
    p["inject_b"] = np.full(channels, float(inject_bias))
    return p


def weight_cnn_forward(img: np.ndarray, p: dict, profile: "str | CnnProfile" = "desk64"):
    """Score a batch ``(B, 3, S, S)``; returns ``(q (B,), conv5_map, cache)``."""
    prof = get_profile(profile)
    if img.ndim != 4 or img.shape[1:] != (prof.in_channels, prof.input_size, prof.input_size):
        raise ShapeError(
            f"profile {prof.name} expects (B, {prof.in_channels}, {prof.input_size}, {prof.input_size}), got {img.shape}"
        )
    cache = {"convs": [], "fcs": []}
    h = img
    conv5 = None
    for i, c in enumerate(prof.convs, start=1):
        h, cc = conv2d_forward(h, p[f"conv{i}_w"], p[f"conv{i}_b"], stride=c.stride, pad=c.pad)
        h, mask = relu_forward(h)
        if i == len(prof.convs):
            conv5 = h
        pc = None
        if c.pool:
            h, pc = maxpool_forward(h, 3, 2)
        cache["convs"].append((cc, mask, pc))
    B = h.shape[0]
    cache["flat_shape"] = h.shape
    h = h.reshape(B, -1)
    n_fc = len(prof.fc)
    for k, i in enumerate(range(6, 6 + n_fc)):
        h, lc = linear_forward(h, p[f"fc{i}_w"], p[f"fc{i}_b"])
        mask = None
        if k + 1 < n_fc:
            h, mask = relu_forward(h)
        cache["fcs"].append((lc, mask))
    logit = h[:, 0]
    cache["logit"] = logit
    return softplus(logit), conv5, cache


def weight_cnn_backward(dq, dconv5, p: dict, cache: dict, profile: "str | CnnProfile" = "desk64"):
    """Reverse mode of :func:`weight_cnn_forward`.

    ``dq`` (B,) is the gradient on the scores, ``dconv5`` an extra gradient on the
    tapped conv5 activation (from the injection head); either may be ``None``.
    Returns ``(dimg, grads)``.
    """
    prof = get_profile(profile)
    g = {}
    B = cache["logit"].shape[0]
    dq = np.zeros(B) if dq is None else np.asarray(dq, dtype=np.float64)
    dh = (dq * sigmoid(cache["logit"]))[:, None]
    n_fc = len(prof.fc)
    for k in range(n_fc - 1, -1, -1):
        i = 6 + k
        lc, mask = cache["fcs"][k]
        if mask is not None:
            dh = relu_backward(dh, mask)
        dh, g[f"fc{i}_w"], g[f"fc{i}_b"] = linear_backward(dh, lc)
    dh = dh.reshape(cache["flat_shape"])
    for k in range(len(prof.convs) - 1, -1, -1):
        i = k + 1
        cc, mask, pc = cache["convs"][k]
        if pc is not None:
            dh = maxpool_backward(dh, pc)
        if i == len(prof.convs) and dconv5 is not None:
            dh = dh + dconv5
        dh = relu_backward(dh, mask)
        dh, g[f"conv{i}_w"], g[f"conv{i}_b"] = conv2d_backward(dh, cc)
    return dh, g


def normalize_weights(q1, q2, q3) -> np.ndarray:
    """``q_i / sum q``, or equal thirds when the scores sum to (almost) zero.

    Works on scalars or batched arrays.
    """
    q = np.stack(np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (q1, q2, q3))))
    if np.any(q < 0):
        raise ValueError(f"link scores must be non-negative, got {q.tolist()}")
    total = q.sum(axis=0)
    live = total > WEIGHT_EPS
    return np.where(live, q / np.where(live, total, 1.0), 1.0 / 3.0)


def normalize_weights_backward(dz: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Gradient on ``q`` (3, ...) given the gradient on the normalised weights."""
    q = np.asarray(q, dtype=np.float64)
    total = q.sum(axis=0)
    live = total > WEIGHT_EPS
    safe = np.where(live, total, 1.0)
    z = q / safe
    # the uniform fallback is constant, so it passes no gradient
    return np.where(live, (dz - (dz * z).sum(axis=0)) / safe, 0.0)


def build_inject_map(conv5: np.ndarray, p: dict, target_shape: tuple[int, int, int]):
    """1x1 projection to C channels, sigmoid, bilinear resize to HxW; returns ``(map, cache)``."""
    C, H, W = target_shape
    if p["inject_w"].shape[0] != C:
        raise ShapeError(f"inject projection makes {p['inject_w'].shape[0]} channels, target has {C}")
    pre = np.einsum("oc,bchw->bohw", p["inject_w"], conv5) + p["inject_b"][None, :, None, None]
    s = sigmoid(pre)
    out = resize2d(s, H, W)
    return out, {"conv5": conv5, "s": s}


def build_inject_map_backward(dmap: np.ndarray, p: dict, cache: dict):
    s, conv5 = cache["s"], cache["conv5"]
    ds = resize2d_backward(dmap, s.shape[2:])
    dpre = ds * s * (1.0 - s)
    g = {
        "inject_w": np.einsum("bohw,bchw->oc", dpre, conv5),
        "inject_b": dpre.sum(axis=(0, 2, 3)),
    }
    dconv5 = np.einsum("oc,bohw->bchw", p["inject_w"], dpre)
    return dconv5, g
