"""Frame -> images: simulate a scene, range-compress, cancel statics, split the
MTI matrix into subspaces and render raw / clean / per-subspace RTM and DTM images.

Subspace images are rendered against the parent frame's peak so all three
share one intensity scale.  Link order everywhere is (target, wall, noise).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RadarConfig, make_rng, ordered_map, tensor_io_read, tensor_io_write
from .preprocess import (
    IMAGE_SIZE,
    build_dtm,
    build_rtm,
    dtm_spectrogram,
    mti,
    peak_db,
    range_profile,
    rtm_magnitude,
)
from .sim import STATES, MotionState, clean_target, make_scene, synthesize_echo
from .subspace import SeparationParams, SubspaceTriple, svd_separate

SUBSPACE_ORDER = ("target", "wall", "noise")


@dataclass(frozen=True)
class DatasetConfig:
    radar: RadarConfig = field(default_factory=RadarConfig)
    states: tuple[str, ...] = tuple(s.value for s in STATES)
    frames_per_state: int = 20
    wall_amplitude: float = 10.0
    snr_db: float = 20.0
    alpha: float = 1.0
    image_size: int = IMAGE_SIZE
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(MotionState.parse(s).value for s in self.states))
        if not self.states:
            raise ValueError("at least one motion state is required")
        if self.frames_per_state < 1:
            raise ValueError("frames_per_state must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["radar"] = self.radar.to_dict()
        d["states"] = list(self.states)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if isinstance(d.get("radar"), dict):
            d["radar"] = RadarConfig.from_dict(d["radar"])
        if "states" in d:
            d["states"] = tuple(d["states"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


def separate_frame(phi: np.ndarray, cfg: RadarConfig, params: SeparationParams = SeparationParams()):
    """Split the gated MTI matrix; returns full-width subspace matrices and the triple."""
    gate = cfg.gate_bins()
    triple = svd_separate(phi[:, gate], params)
    mats = []
    for part in (triple.target, triple.wall, triple.noise):
        full = np.zeros_like(phi)
        full[:, gate] = part
        mats.append(full)
    return mats, triple


def render_maps(phi: np.ndarray, subspaces, cfg: RadarConfig, size: int = IMAGE_SIZE) -> dict:
    """Raw and per-subspace RTM/DTM images; subspaces reuse the parent's dB reference."""
    rtm_ref = peak_db(rtm_magnitude(phi, cfg))
    dtm_ref = peak_db(dtm_spectrogram(phi, cfg))
    return {
        "rtm": build_rtm(phi, cfg, size=size),
        "dtm": build_dtm(phi, cfg, size=size),
        "rtm_sub": np.stack([build_rtm(m, cfg, rtm_ref, size) for m in subspaces]),
        "dtm_sub": np.stack([build_dtm(m, cfg, dtm_ref, size) for m in subspaces]),
    }


def process_echo(echo: np.ndarray, cfg: RadarConfig, params: SeparationParams = SeparationParams(), size: int = IMAGE_SIZE):
    """Echo matrix -> (images dict, SubspaceTriple)."""
    phi = mti(range_profile(echo, cfg))
    mats, triple = separate_frame(phi, cfg, params)
    return render_maps(phi, mats, cfg, size), triple


def clean_maps(clean_echo: np.ndarray, cfg: RadarConfig, size: int = IMAGE_SIZE) -> dict:
    phi = mti(range_profile(clean_echo, cfg))
    return {"rtm_clean": build_rtm(phi, cfg, size=size), "dtm_clean": build_dtm(phi, cfg, size=size)}


@dataclass
class Frame:
    frame_id: str
    state: MotionState
    index: int
    split: str
    echo: np.ndarray
    clean: np.ndarray
    images: dict
    report: dict


def make_frame(dcfg: DatasetConfig, state: "MotionState | str", index: int) -> Frame:
    state = MotionState.parse(state)
    rng = make_rng(dcfg.seed, state.label, index)
    scene = make_scene(state, dcfg.radar, rng, dcfg.wall_amplitude, dcfg.snr_db)
    echo = synthesize_echo(scene, dcfg.radar, rng)
    clean = clean_target(scene, dcfg.radar)
    images, triple = process_echo(echo, dcfg.radar, SeparationParams(dcfg.alpha), dcfg.image_size)
    images.update(clean_maps(clean, dcfg.radar, dcfg.image_size))
    n_val = int(round(dcfg.frames_per_state * dcfg.val_fraction))
    split = "val" if index >= dcfg.frames_per_state - n_val else "train"
    return Frame(f"{state.label}_{index:04d}", state, index, split, echo, clean, images, triple.report())


def make_dataset(dcfg: DatasetConfig, workers: int | None = None) -> list[Frame]:
    jobs = [(s, i) for s in dcfg.states for i in range(dcfg.frames_per_state)]
    return ordered_map(lambda job: make_frame(dcfg, *job), jobs, workers)


# --------------------------------------------------------------------------- on-disk layout

IMAGE_KEYS = ("rtm", "rtm_clean", "rtm_sub", "dtm", "dtm_clean", "dtm_sub")


def write_dataset(frames: list[Frame], out: Path) -> list[Path]:
    """``frames/<id>.{echo,clean,rtm,rtm_clean,rtm_sub,dtm,dtm_clean,dtm_sub}.twrt`` plus ``labels.csv``."""
    out = Path(out)
    fdir = out / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    written = []
    for fr in frames:
        for key, arr in (("echo", fr.echo), ("clean", fr.clean), *((k, fr.images[k]) for k in IMAGE_KEYS)):
            p = fdir / f"{fr.frame_id}.{key}.twrt"
            tensor_io_write(arr, p)
            written.append(p)
    labels = out / "labels.csv"
    with labels.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "state", "label", "index", "split"])
        for fr in frames:
            w.writerow([fr.frame_id, fr.state.value, fr.state.label, fr.index, fr.split])
    written.append(labels)
    return written


def read_labels(data_dir: Path) -> list[dict]:
    path = Path(data_dir) / "labels.csv"
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    for r in rows:
        r["label"] = int(r["label"])
        r["index"] = int(r["index"])
    return rows


def load_images(data_dir: Path, kind: str, split: str | None = None):
    """Stack one map kind: returns ``(rows, raw (N,C,H,W), subspaces (N,3,C,H,W), clean (N,C,H,W))``."""
    if kind not in ("rtm", "dtm"):
        raise ValueError(f"map kind must be 'rtm' or 'dtm', got {kind!r}")
    rows = [r for r in read_labels(data_dir) if split is None or r["split"] == split]
    if not rows:
        raise ValueError(f"no frames in {data_dir} for split {split!r}")
    fdir = Path(data_dir) / "frames"
    raw = np.stack([tensor_io_read(fdir / f"{r['frame_id']}.{kind}.twrt") for r in rows])
    sub = np.stack([tensor_io_read(fdir / f"{r['frame_id']}.{kind}_sub.twrt") for r in rows])
    clean = np.stack([tensor_io_read(fdir / f"{r['frame_id']}.{kind}_clean.twrt") for r in rows])
    return rows, raw, sub, clean


def frames_to_arrays(frames: list[Frame], kind: str, split: str | None = None):
    """In-memory counterpart of :func:`load_images`."""
    sel = [f for f in frames if split is None or f.split == split]
    raw = np.stack([f.images[kind] for f in sel])
    sub = np.stack([f.images[f"{kind}_sub"] for f in sel])
    clean = np.stack([f.images[f"{kind}_clean"] for f in sel])
    labels = np.array([f.state.label for f in sel])
    return labels, raw, sub, clean

