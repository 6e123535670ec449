"""Three-link fusion network: per-subspace attention -> LISTA links, CNN weight links,
weighted fusion, the layer-tap perceptual loss, Nesterov SGD and model files.

Parameters live in one flat ``dict`` keyed by dotted names::

    link{k}.attn.<name>         coordinate attention of link k (k = 0, 1, 2)
    link{k}.lista.{j}.<name>    LISTA layer j of link k
    link{k}.cnn.<name>          scoring CNN + injection head of link k

Buffers (batch-norm running statistics) sit in the same dict but are never
differentiated or updated by the optimiser.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptweight import (
    build_inject_map,
    build_inject_map_backward,
    get_profile,
    init_weight_cnn,
    normalize_weights,
    normalize_weights_backward,
    weight_cnn_backward,
    weight_cnn_forward,
)
from .attention import (
    BUFFERS,
    coord_attention_backward,
    coord_attention_forward,
    init_attention,
    update_running_stats,
)
from .core import ShapeError, make_rng, ordered_map, read_twrt_stream, write_twrt_stream
from .lista import ListaConfig, init_lista_stack, lift_top_singular, lista_stack_backward, lista_stack_forward
from .nn import resize2d

N_LINKS = 3
MODEL_MAGIC = b"MCAE"
MODEL_VERSION = 1
MAP_KINDS = ("rtm", "dtm")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    image_size: int = 64
    cnn_profile: str = "desk64"
    k_r: int = 3
    lista: ListaConfig = field(default_factory=ListaConfig)
    attention_bypass: bool = False
    detach_weights_in_loss: bool = False
    attention_gate_bias: float = 4.0
    inject_bias: float = 6.0
    lista_noise: float = 0.01
    lista_theta: float = 0.01

    def __post_init__(self):
        get_profile(self.cnn_profile)
        if self.channels % self.k_r:
            raise ValueError("channels must be divisible by k_r")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("lista"), dict):
            d["lista"] = ListaConfig(**d["lista"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    epochs: int = 50
    shuffle_every_epochs: int = 1
    validate_every_batches: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "shuffle_every_epochs", "validate_every_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MCAEModel:
    config: ModelConfig
    params: dict
    map_kind: str = "rtm"
    seed: int = 0

    def __post_init__(self):
        if self.map_kind not in MAP_KINDS:
            raise ValueError(f"map_kind must be one of {MAP_KINDS}, got {self.map_kind!r}")

    def copy(self) -> "MCAEModel":
        return MCAEModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.map_kind, self.seed)


# --------------------------------------------------------------------------- params


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFERS


def trainable_names(params: dict) -> list[str]:
    return [k for k in params if not is_buffer(k)]


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _link_parts(params: dict, k: int, cfg: ModelConfig):
    attn = _sub(params, f"link{k}.attn.")
    layers = [_sub(params, f"link{k}.lista.{j}.") for j in range(cfg.lista.n_layers)]
    cnn = _sub(params, f"link{k}.cnn.")
    return attn, layers, cnn


def init_model(
    cfg: ModelConfig = ModelConfig(), seed: int = 0, identity: bool = False, map_kind: str = "rtm"
) -> MCAEModel:
    """Fresh model; ``identity=True`` makes every LISTA stack an exact identity map
    and every injection gate exactly 1."""
    params = {}
    n = cfg.lista.fragment_dim(cfg.image_size, cfg.image_size)
    for k in range(N_LINKS):
        rng = make_rng(seed, 1, k)
        attn = init_attention(rng, cfg.channels, cfg.k_r, cfg.attention_gate_bias)
        layers = init_lista_stack(
            rng, cfg.channels, n, cfg.lista, identity=identity, noise=cfg.lista_noise, theta=cfg.lista_theta
        )
        # sigmoid(40) rounds to exactly 1.0 in float64
        cnn = init_weight_cnn(rng, cfg.cnn_profile, cfg.channels, 40.0 if identity else cfg.inject_bias)
        params.update({f"link{k}.attn.{a}": v for a, v in attn.items()})
        for j, layer in enumerate(layers):
            params.update({f"link{k}.lista.{j}.{a}": v for a, v in layer.items()})
        params.update({f"link{k}.cnn.{a}": v for a, v in cnn.items()})
    return MCAEModel(cfg, params, map_kind, seed)


# --------------------------------------------------------------------------- forward


def _check_inputs(xs, cfg: ModelConfig):
    if len(xs) != N_LINKS:
        raise ShapeError(f"expected {N_LINKS} subspace images, got {len(xs)}")
    shape = np.shape(xs[0])
    for x in xs:
        if np.shape(x) != shape:
            raise ShapeError(f"subspace images disagree in shape: {np.shape(x)} vs {shape}")
    if len(shape) != 4 or shape[1] != cfg.channels:
        raise ShapeError(f"subspace images must be (B, {cfg.channels}, H, W), got {shape}")
    return shape


def _attend(x, attn, cfg, mode):
    if cfg.attention_bypass:
        return x, None
    return coord_attention_forward(x, attn, mode)


def _weight_link(x, cnn, cfg):
    prof = get_profile(cfg.cnn_profile)
    img = resize2d(x, prof.input_size, prof.input_size)
    q, conv5, ccache = weight_cnn_forward(img, cnn, prof)
    inject, icache = build_inject_map(conv5, cnn, x.shape[1:])
    return q, inject, (ccache, icache, img.shape)


def mcae_forward(xs, model: MCAEModel, mode: str = "eval", forced_weights=None):
    """Fuse the three links for a batch of subspace images ``xs[k]`` (B, C, H, W).

    Returns ``(z_out, link_outputs, weights, taps)`` where ``weights`` is (3, B)
    and ``taps[k]`` lists the per-layer LISTA outputs of link k.
    """
    cfg = model.config
    _check_inputs(xs, cfg)
    B = xs[0].shape[0]

    def run(k):
        attn, layers, cnn = _link_parts(model.params, k, cfg)
        q, inject, _ = _weight_link(xs[k], cnn, cfg)
        a, _ = _attend(xs[k], attn, cfg, mode)
        z, taps, _ = lista_stack_forward(a, layers, inject, cfg.lista)
        return q, z, taps

    res = ordered_map(run, range(N_LINKS))
    if forced_weights is not None:
        w = np.broadcast_to(np.asarray(forced_weights, dtype=np.float64).reshape(N_LINKS, -1), (N_LINKS, B))
    else:
        w = normalize_weights(*(r[0] for r in res))
    z_out = sum(w[k][:, None, None, None] * res[k][1] for k in range(N_LINKS))
    return z_out, [r[1] for r in res], w, [r[2] for r in res]


# --------------------------------------------------------------------------- losses


def perceptual_loss(tap_pred: np.ndarray, tap_target: np.ndarray) -> np.ndarray:
    """Per-sample mean squared tap difference ``(1/CHW) ||a - b||^2``.

    Accepts (C, H, W) tensors (returns a scalar) or batches (B, C, H, W).
    """
    tap_pred = np.asarray(tap_pred, dtype=np.float64)
    tap_target = np.asarray(tap_target, dtype=np.float64)
    if tap_pred.shape != tap_target.shape:
        raise ShapeError(f"tap shapes differ: {tap_pred.shape} vs {tap_target.shape}")
    d = tap_pred - tap_target
    if d.ndim == 3:
        return float(np.mean(d * d))
    return np.mean(d * d, axis=tuple(range(1, d.ndim)))


def total_loss(link_losses, weights) -> float:
    """``sum_k sum_j w_k L_kj`` averaged over the batch.

    ``link_losses`` is (3, n_layers) or (3, n_layers, B); ``weights`` is (3,) or (3, B).
    """
    ll = np.asarray(link_losses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if ll.ndim == 2:
        return float(np.sum(w * ll.sum(axis=1)))
    return float(np.mean(np.sum(w * ll.sum(axis=1), axis=0)))


def loss_and_grads(xs, target, model: MCAEModel, mode: str = "train", need_grads: bool = True):
    """Training loss on a batch and its gradient wrt every trainable parameter.

    Predicted taps come from link k applied to ``xs[k]``; target taps from the
    same link (same injection map) applied to the clean ``target``.  Returns
    ``(loss, grads, info)``; ``info`` carries weights, per-layer losses and the
    attention caches needed to update running statistics.
    """
    cfg = model.config
    shape = _check_inputs(xs, cfg)
    if np.shape(target) != shape:
        raise ShapeError(f"target {np.shape(target)} does not match inputs {shape}")
    B = shape[0]
    chw = float(np.prod(shape[1:]))

    def fwd(k):
        attn, layers, cnn = _link_parts(model.params, k, cfg)
        q, inject, wcache = _weight_link(xs[k], cnn, cfg)
        a_p, ac_p = _attend(xs[k], attn, cfg, mode)
        a_t, ac_t = _attend(target, attn, cfg, mode)
        _, taps_p, lc_p = lista_stack_forward(a_p, layers, inject, cfg.lista)
        _, taps_t, lc_t = lista_stack_forward(a_t, layers, inject, cfg.lista)
        diffs = [tp - tt for tp, tt in zip(taps_p, taps_t)]
        per_layer = np.stack([np.mean(d * d, axis=(1, 2, 3)) for d in diffs])  # (n_layers, B)
        return dict(q=q, wcache=wcache, ac_p=ac_p, ac_t=ac_t, lc_p=lc_p, lc_t=lc_t, diffs=diffs, per_layer=per_layer)

    links = ordered_map(fwd, range(N_LINKS))
    q = np.stack([lk["q"] for lk in links])
    w = normalize_weights(*q)
    per_layer = np.stack([lk["per_layer"] for lk in links])  # (3, n_layers, B)
    loss = total_loss(per_layer, w)
    info = {"weights": w, "per_layer": per_layer.mean(axis=2), "attn_caches": [lk["ac_p"] for lk in links]}
    if not need_grads:
        return loss, None, info

    if cfg.detach_weights_in_loss:
        dq = np.zeros_like(q)
    else:
        dw = per_layer.sum(axis=1) / B
        dq = normalize_weights_backward(dw, q)

    def bwd(k):
        lk = links[k]
        attn, layers, cnn = _link_parts(model.params, k, cfg)
        scale = (2.0 * w[k] / (B * chw))[:, None, None, None]
        d_p = [scale * d for d in lk["diffs"]]
        d_t = [-g for g in d_p]
        da_p, lg_p, dinj_p = lista_stack_backward(None, d_p, layers, lk["lc_p"], cfg.lista)
        da_t, lg_t, dinj_t = lista_stack_backward(None, d_t, layers, lk["lc_t"], cfg.lista)
        g = {}
        for j in range(cfg.lista.n_layers):
            for name in lg_p[j]:
                g[f"link{k}.lista.{j}.{name}"] = lg_p[j][name] + lg_t[j][name]
        if not cfg.attention_bypass:
            _, ga_p = coord_attention_backward(da_p, attn, lk["ac_p"])
            _, ga_t = coord_attention_backward(da_t, attn, lk["ac_t"])
            for name in ga_p:
                g[f"link{k}.attn.{name}"] = ga_p[name] + ga_t[name]
        ccache, icache, _ = lk["wcache"]
        dinj = dinj_p + dinj_t if dinj_p is not None else np.zeros(shape)
        dconv5, gi = build_inject_map_backward(dinj, cnn, icache)
        _, gc = weight_cnn_backward(dq[k], dconv5, cnn, ccache, cfg.cnn_profile)
        gc.update(gi)
        for name, v in gc.items():
            g[f"link{k}.cnn.{name}"] = v
        return g

    grads = {}
    for g in ordered_map(bwd, range(N_LINKS)):
        grads.update(g)
    for name in trainable_names(model.params):
        if name not in grads:
            # attention bypassed: its parameters receive no gradient
            grads[name] = np.zeros_like(model.params[name])
    return loss, grads, info


# --------------------------------------------------------------------------- optimiser


def sgd_nesterov_step(params: dict, velocity: dict, grads: dict, lr: float, mu: float):
    """``v <- mu v - lr g``, ``theta <- theta + v`` where ``g`` was taken at the lookahead point."""
    new_p, new_v = dict(params), dict(velocity)
    for k, g in grads.items():
        v = mu * velocity.get(k, 0.0) - lr * g
        new_v[k] = np.asarray(v, dtype=np.float64)
        new_p[k] = params[k] + v
    return new_p, new_v


def _lookahead(params: dict, velocity: dict, mu: float) -> dict:
    return {k: (v + mu * velocity[k] if k in velocity else v) for k, v in params.items()}


def _project(params: dict) -> None:
    # shrinkage thresholds stay non-negative
    for k in params:
        if k.endswith(".theta") and params[k] < 0:
            params[k] = np.array(0.0)


# --------------------------------------------------------------------------- gradient check


def grad_check_model(
    model: MCAEModel,
    xs,
    target,
    eps: float = 1e-5,
    coords_per_group: int = 3,
    seed: int = 0,
    atol: float = 1e-7,
) -> dict:
    """Central-difference check of the full training loss on a sample.

    Every parameter tensor is a group; ``coords_per_group`` entries of each are
    probed (all of them for small tensors).  Relative error is
    ``|a - n| / max(|a|, |n|, atol)``.  Batch norm runs in train mode without
    touching the running buffers.
    """
    _, grads, _ = loss_and_grads(xs, target, model, "train")
    rng = make_rng(seed, 7)
    report = {}
    for name in sorted(trainable_names(model.params)):
        arr = model.params[name]
        size = max(arr.size, 1)
        idx = np.arange(size) if size <= coords_per_group else np.sort(rng.choice(size, coords_per_group, replace=False))
        worst = 0.0
        for i in idx:
            base = arr.copy()

            def f(delta):
                pert = base.copy()
                pert.reshape(-1)[i] += delta
                model.params[name] = pert
                return loss_and_grads(xs, target, model, "train", need_grads=False)[0]

            num = (f(eps) - f(-eps)) / (2 * eps)
            model.params[name] = base
            ana = float(np.asarray(grads[name]).reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, rel)
        report[name] = worst
    return {"groups": report, "worst": max(report.values()), "eps": eps}


# --------------------------------------------------------------------------- training


@dataclass
class TrainData:
    """Image tensors for one map kind: ``subspaces`` (N, 3, C, H, W), ``target`` (N, C, H, W)."""

    subspaces: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if len(self.target) == 0:
            raise ValueError("empty dataset")
        if self.subspaces.shape[0] != self.target.shape[0] or self.subspaces.shape[1] != N_LINKS:
            raise ShapeError(f"subspaces {self.subspaces.shape} vs target {self.target.shape}")

    def __len__(self):
        return len(self.target)

    def batch(self, idx):
        xs = [np.ascontiguousarray(self.subspaces[idx, k]) for k in range(N_LINKS)]
        return xs, self.target[idx]


def evaluate_loss(model: MCAEModel, data: TrainData, batch_size: int = 32) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        xs, t = data.batch(idx)
        total += loss_and_grads(xs, t, model, "eval", need_grads=False)[0] * len(idx)
    return total / len(data)


def train(model: MCAEModel, data: TrainData, cfg: TrainConfig = TrainConfig(), val: TrainData | None = None, log=None):
    """Nesterov SGD over shuffled mini-batches; returns ``(model, history)``.

    ``history`` holds the per-batch loss curve, per-epoch means, and the
    validation loss every ``validate_every_batches`` batches.
    """
    model = model.copy()
    params = model.params
    names = trainable_names(params)
    velocity = {k: np.zeros_like(params[k]) for k in names}
    rng = make_rng(cfg.seed, 2)
    order = np.arange(len(data))
    hist = {"batch_loss": [], "epoch_loss": [], "val_loss": [], "weights": []}
    step = 0
    for epoch in range(cfg.epochs):
        if epoch % cfg.shuffle_every_epochs == 0:
            order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(data), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xs, t = data.batch(idx)
            model.params = _lookahead(params, velocity, cfg.momentum)
            loss, grads, info = loss_and_grads(xs, t, model, "train")
            new_p, velocity = sgd_nesterov_step(params, velocity, {k: grads[k] for k in names}, cfg.lr, cfg.momentum)
            _project(new_p)
            if not model.config.attention_bypass:
                for k, ac in enumerate(info["attn_caches"]):
                    sub = {b: new_p[f"link{k}.attn.{b}"] for b in BUFFERS}
                    update_running_stats(sub, ac)
                    for b in BUFFERS:
                        new_p[f"link{k}.attn.{b}"] = sub[b]
            params = new_p
            model.params = params
            losses.append(loss)
            hist["batch_loss"].append(loss)
            step += 1
            if val is not None and step % cfg.validate_every_batches == 0:
                hist["val_loss"].append((step, evaluate_loss(model, val, cfg.batch_size)))
        hist["epoch_loss"].append(float(np.mean(losses)))
        hist["weights"].append(info["weights"].mean(axis=1).tolist())
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {hist['epoch_loss'][-1]:.6g}")
    model.params = params
    return model, hist


def augment(xs, model: MCAEModel, map_kind: str, forced_weights=None) -> np.ndarray:
    """Eval-mode fused output clipped to [0, 1]; refuses a model trained for another map kind."""
    if map_kind != model.map_kind:
        raise ValueError(f"model was trained on {model.map_kind} maps, got a {map_kind} frame")
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    single = xs[0].ndim == 3
    if single:
        xs = [x[None] for x in xs]
    z, _, _, _ = mcae_forward(xs, model, "eval", forced_weights)
    z = np.clip(z, 0.0, 1.0)
    return z[0] if single else z


# --------------------------------------------------------------------------- model files


def save_model(model: MCAEModel, path, created: str | None = None) -> None:
    """``MCAE`` magic, u32 header length, JSON header, then one TWRT record per
    parameter in the order listed under ``header["params"]``."""
    names = sorted(model.params)
    header = {
        "version": MODEL_VERSION,
        "map_kind": model.map_kind,
        "cnn_profile": model.config.cnn_profile,
        "created": created if created is not None else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "seed": model.seed,
        "config": model.config.to_dict(),
        "params": names,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        write_twrt_stream(buf, model.params[n])
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc.strerror or exc}") from exc


def load_model(path) -> MCAEModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc.strerror or exc}") from exc
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    if header.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {header.get('version')}")
    f = io.BytesIO(raw[8 + hlen :])
    params = {n: read_twrt_stream(f) for n in header["params"]}
    for n in params:
        if n.endswith(".theta"):
            params[n] = params[n].reshape(())
    cfg = ModelConfig.from_dict(header["config"])
    return MCAEModel(cfg, params, header["map_kind"], header["seed"])


# --------------------------------------------------------------------------- kink-free fixtures


def _cnn_margins(img, cnn, prof, shift_to: float | None = None):
    """Smallest |pre-activation| over every ReLU and the smallest top-two gap
    over every max-pool window.  With ``shift_to`` set, biases are raised in
    place so each ReLU input is at least that large (the layer becomes linear
    on this batch)."""
    from numpy.lib.stride_tricks import sliding_window_view

    from .nn import conv2d_forward, linear_forward

    relu_m, pool_m = np.inf, np.inf
    h = img
    for i, c in enumerate(prof.convs, start=1):
        pre, _ = conv2d_forward(h, cnn[f"conv{i}_w"], np.zeros_like(cnn[f"conv{i}_b"]), c.stride, c.pad)
        if shift_to is not None:
            low = pre.min(axis=(0, 2, 3))
            cnn[f"conv{i}_b"] = np.maximum(cnn[f"conv{i}_b"], shift_to - low)
        pre = pre + cnn[f"conv{i}_b"][None, :, None, None]
        relu_m = min(relu_m, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
        if c.pool:
            win = sliding_window_view(h, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
            win = np.sort(win.reshape(*win.shape[:4], 9), axis=-1)
            pool_m = min(pool_m, float((win[..., -1] - win[..., -2]).min()))
            h = win[..., -1]
    h = h.reshape(h.shape[0], -1)
    for k, i in enumerate(range(6, 6 + len(prof.fc) - 1)):
        pre, _ = linear_forward(h, cnn[f"fc{i}_w"], np.zeros_like(cnn[f"fc{i}_b"]))
        if shift_to is not None:
            cnn[f"fc{i}_b"] = np.maximum(cnn[f"fc{i}_b"], shift_to - pre.min(axis=0))
        pre = pre + cnn[f"fc{i}_b"]
        relu_m = min(relu_m, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    return relu_m, pool_m


def kink_margins(model: MCAEModel, xs, target) -> dict:
    """Distance of every non-smooth point in the loss from its kink on this sample.

    ``lista``: min over layers of ``| |g| - theta |`` (shrinkage input vs threshold),
    ``relu``: min |ReLU input| in the scoring CNNs, ``pool``: min top-two gap in
    any max-pool window, ``spectral``: min top-two singular value gap of any
    ``W_d`` (the step size ``1/||W_d||^2`` bends sharply near a tie).  Central differences with step ``eps`` are only
    trustworthy when these are comfortably larger than ``eps`` times the local
    sensitivity.
    """
    from .lista import encoder_matrices, lista_layer_forward, spectral_gap, to_fragments
    from .nn import conv2d_forward

    cfg = model.config
    prof = get_profile(cfg.cnn_profile)
    out = {"lista": np.inf, "relu": np.inf, "pool": np.inf}
    out["spectral"] = min((spectral_gap(v) for n, v in model.params.items() if n.endswith("W_d")), default=np.inf)
    for k in range(N_LINKS):
        attn, layers, cnn = _link_parts(model.params, k, cfg)
        img = resize2d(xs[k], prof.input_size, prof.input_size)
        r, p = _cnn_margins(img, dict(cnn), prof)
        out["relu"], out["pool"] = min(out["relu"], r), min(out["pool"], p)
        _, inject, _ = _weight_link(xs[k], cnn, cfg)
        for x in (xs[k], target):
            cur, _ = _attend(x, attn, cfg, "train")
            for j, layer in enumerate(layers):
                y, _ = conv2d_forward(cur, layer["conv_w"], layer["conv_b"], 1, 1)
                f = to_fragments(y, cfg.lista.patch)
                S, we, _ = encoder_matrices(layer, cfg.lista)
                g = f @ S.T + f @ we.T
                theta = float(layer["theta"])
                if cfg.lista.paper_literal:
                    m = min(np.abs(g - theta).min(), np.abs(g).min())
                else:
                    m = np.abs(np.abs(g) - theta).min()
                out["lista"] = min(out["lista"], float(m))
                z, _ = lista_layer_forward(cur, layer, cfg.lista)
                cur = z * inject if j + 1 < len(layers) else z
    return out


def gradcheck_fixture(
    n_layers: int = 2, size: int = 16, batch: int = 2, seed: int = 0, profile: str = "desk64", margin: float = 0.05
):
    """Identity-anchored model plus a sample on which the loss is smooth nearby.

    Inputs are drawn from [0.3, 1] so shrinkage inputs stay well above the
    small threshold; every scoring-CNN bias is raised until all ReLUs are
    strictly active on the sample; the injection head gets a non-zero
    projection so its gradient path is exercised; each ``W_d`` gets a clear top
    singular value so its spectral norm is smooth.  Returns
    ``(model, xs, target, margins)``.
    """
    # each layer shrinks by theta, loses gain to dictionary noise through the
    # spectral-norm scaling, and is multiplied by its injection gate; budget all
    # three per stack so deep activations stay clear of the shrinkage kink
    keep = 0.5 ** (1.0 / max(n_layers - 1, 1))
    cfg = ModelConfig(
        image_size=size,
        cnn_profile=profile,
        lista=ListaConfig(n_layers=n_layers),
        lista_noise=0.01 / n_layers,
        lista_theta=0.02 / n_layers,
        inject_bias=max(1.0, float(np.log(keep / (1.0 - keep)))),
        attention_gate_bias=1.0,
    )
    model = init_model(cfg, seed=seed)
    for name in [n for n in model.params if n.endswith("W_d")]:
        model.params[name] = lift_top_singular(model.params[name], margin)
    rng = make_rng(seed, 9)
    xs = [rng.uniform(0.3, 1.0, (batch, cfg.channels, size, size)) for _ in range(N_LINKS)]
    target = rng.uniform(0.3, 1.0, (batch, cfg.channels, size, size))
    prof = get_profile(profile)
    for k in range(N_LINKS):
        pre = f"link{k}.cnn."
        cnn = _sub(model.params, pre)
        cnn["inject_w"] = 0.5 * rng.standard_normal(cnn["inject_w"].shape) / np.sqrt(cnn["inject_w"].shape[1])
        _cnn_margins(resize2d(xs[k], prof.input_size, prof.input_size), cnn, prof, shift_to=margin)
        model.params.update({pre + n: v for n, v in cnn.items()})
    return model, xs, target, kink_margins(model, xs, target)
