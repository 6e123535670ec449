"""Shared plumbing: radar configuration, seeded RNG streams, TWRT tensor files and PNG export.

Tensors are plain numpy arrays (``float64`` or ``complex128``).  The TWRT
container is a tiny self-describing binary format::

    offset  size  field
    0       4     magic b"TWRT"
    4       1     version (1)
    5       1     kind (0 = real, 1 = complex)
    6       1     rank
    7       1     reserved (0)
    8       4*r   little-endian u32 extents
    ...           little-endian float64 payload, row-major; complex as (re, im) pairs
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

TWRT_MAGIC = b"TWRT"
TWRT_VERSION = 1
_HEADER = struct.Struct("<4sBBBB")


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation requires."""


@dataclass(frozen=True)
class RadarConfig:
    """Stepped-frequency radar and scene geometry.

    Defaults follow the measured system: 0.5 GHz start, 10 MHz step, 200 steps
    (0.5-2.5 GHz), 1024-point range grid, 0.23 m wall with eps_r 7.4 and 4 s frames.
    ``M`` sweeps per frame is a desk-scale choice (64 Hz slow-time rate).
    """

    f0: float = 0.5e9
    delta_f: float = 10e6
    K: int = 200
    M: int = 256
    frame_duration: float = 4.0
    N: int = 1024
    wall_thickness: float = 0.23
    wall_eps_r: float = 7.4
    range_gate: tuple[float, float] = (1.5, 6.5)

    def __post_init__(self):
        object.__setattr__(self, "range_gate", tuple(float(v) for v in self.range_gate))
        if self.f0 <= 0 or self.delta_f <= 0:
            raise ValueError("f0 and delta_f must be positive")
        if self.K < 2 or self.M < 2:
            raise ValueError("K and M must be at least 2")
        if self.N < self.K:
            raise ValueError(f"N ({self.N}) must be >= K ({self.K})")
        if not self.range_gate[0] < self.range_gate[1]:
            raise ValueError(f"range_gate must be increasing, got {self.range_gate}")

    @property
    def prf(self) -> float:
        """Slow-time sample rate in Hz."""
        return self.M / self.frame_duration

    @property
    def range_bin_m(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.N * self.delta_f)

    @property
    def frequencies(self) -> np.ndarray:
        return self.f0 + self.delta_f * np.arange(self.K)

    def gate_bins(self) -> np.ndarray:
        """Indices of range bins whose centre lies inside ``range_gate``."""
        r = np.arange(self.N) * self.range_bin_m
        lo, hi = self.range_gate
        return np.flatnonzero((r >= lo) & (r <= hi))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["range_gate"] = list(self.range_gate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RadarConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown RadarConfig keys: {sorted(unknown)}")
        return cls(**d)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return an independent Philox (counter-based) generator for ``(seed, *stream)``.

    The key is derived with ``SeedSequence([seed, *stream])`` so that frame ``i`` of
    a dataset always draws the same numbers no matter how many workers generate
    frames or in which order.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------- TWRT


def write_twrt_stream(f: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.ndim > 255:
        raise ShapeError("TWRT supports rank <= 255")
    is_complex = np.iscomplexobj(t)
    f.write(_HEADER.pack(TWRT_MAGIC, TWRT_VERSION, int(is_complex), t.ndim, 0))
    f.write(struct.pack(f"<{t.ndim}I", *t.shape))
    if is_complex:
        payload = np.ascontiguousarray(t, dtype="<c16")
    else:
        payload = np.ascontiguousarray(t, dtype="<f8")
    f.write(payload.tobytes(order="C"))


def read_twrt_stream(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated TWRT header")
    magic, version, kind, rank, _ = _HEADER.unpack(head)
    if magic != TWRT_MAGIC:
        raise ValueError(f"bad TWRT magic {magic!r}")
    if version != TWRT_VERSION:
        raise ValueError(f"unsupported TWRT version {version}")
    if kind not in (0, 1):
        raise ValueError(f"bad TWRT kind {kind}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    dtype = np.dtype("<c16") if kind else np.dtype("<f8")
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated TWRT payload")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(np.complex128 if kind else np.float64)


def tensor_io_write(t: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``t`` to ``path`` in TWRT format."""
    path = Path(path)
    buf = io.BytesIO()
    write_twrt_stream(buf, t)
    try:
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write TWRT file {path}: {exc.strerror or exc}") from exc


def tensor_io_read(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read TWRT file {path}: {exc.strerror or exc}") from exc
    return read_twrt_stream(io.BytesIO(data))


# --------------------------------------------------------------------------- PNG


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up: ``floor(255 p + 0.5)``."""
    q = np.floor(255.0 * np.clip(img, 0.0, 1.0) + 0.5)
    return q.astype(np.uint8)


def png_export(img: np.ndarray, path: str | os.PathLike) -> None:
    """Save a 3xHxW image in [0,1] as an 8-bit RGB PNG."""
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"png_export needs a 3xHxW image, got shape {img.shape}")
    rgb = quantize_u8(img).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(rgb), mode="RGB").save(Path(path), format="PNG")


# --------------------------------------------------------------------------- misc


def config_hash(obj) -> str:
    """Stable sha256 of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dump_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def worker_count() -> int:
    """Worker cap from ``TWRMCAE_THREADS`` (default: all cores)."""
    raw = os.environ.get("TWRMCAE_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError("TWRMCAE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def ordered_map(fn, items: Sequence, workers: int | None = None) -> list:
    """Map ``fn`` over ``items`` on a thread pool, returning results in input order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


__all__ = [
    "SPEED_OF_LIGHT",
    "RadarConfig",
    "ShapeError",
    "config_hash",
    "dump_json",
    "make_rng",
    "ordered_map",
    "png_export",
    "quantize_u8",
    "read_twrt_stream",
    "tensor_io_read",
    "tensor_io_write",
    "worker_count",
    "write_twrt_stream",
]
