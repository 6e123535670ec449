"""Synthetic stepped-frequency through-wall echoes for the seven motion states.

Each frame is an ``M x K`` complex matrix (slow time x frequency step)::

    S(m, k) = sum_p a_p exp(-j 2 pi (f0 + k df) tau_p(m)) + wall(m, k) + noise(m, k)

with the two-way delay ``tau_p = 2 (R_p + d (sqrt(eps_r) - 1)) / c``: free-space
range plus the extra optical path of crossing the wall once in each direction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import SPEED_OF_LIGHT, RadarConfig

RANGE_LIMITS = (1.5, 6.0)
MULTIPATH_RATIO = 0.3


class MotionState(enum.Enum):
    EMPTY = "empty"
    FACING_WALL = "facing_wall"
    PARALLEL_TO_WALL = "parallel_to_wall"
    SQUAT_UP = "squat_up"
    WALK_PARALLEL = "walk_parallel"
    WALK_PERPENDICULAR = "walk_perpendicular"
    DIAGONAL_ROUND_TRIP = "diagonal_round_trip"

    @classmethod
    def parse(cls, name: "str | MotionState") -> "MotionState":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown motion state {name!r}; expected one of {valid}") from None

    @property
    def label(self) -> int:
        return list(MotionState).index(self)


STATES = tuple(MotionState)


@dataclass
class Scatterer:
    amplitude: float
    ranges: np.ndarray  # metres, one per sweep

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("scatterer amplitude must be non-negative")
        self.ranges = np.asarray(self.ranges, dtype=np.float64)


@dataclass
class Scene:
    state: MotionState
    scatterers: list[Scatterer] = field(default_factory=list)
    wall_amplitude: float = 10.0
    snr_db: float = math.inf

    def __post_init__(self):
        self.state = MotionState.parse(self.state)
        if self.state is MotionState.EMPTY and self.scatterers:
            raise ValueError("an empty scene cannot contain scatterers")
        if self.wall_amplitude < 0:
            raise ValueError("wall_amplitude must be non-negative")

    def to_dict(self) -> dict:
        return {
            "state": self.state.value,
            "wall_amplitude": self.wall_amplitude,
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "scatterers": [
                {"amplitude": s.amplitude, "ranges": s.ranges.tolist()} for s in self.scatterers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        snr = d.get("snr_db")
        return cls(
            state=MotionState.parse(d["state"]),
            scatterers=[Scatterer(s["amplitude"], np.asarray(s["ranges"])) for s in d.get("scatterers", [])],
            wall_amplitude=float(d.get("wall_amplitude", 10.0)),
            snr_db=math.inf if snr is None else float(snr),
        )


def _slow_time(cfg: RadarConfig) -> np.ndarray:
    return np.arange(cfg.M) * (cfg.frame_duration / cfg.M)


def generate_trajectory(
    state: "MotionState | str",
    cfg: RadarConfig,
    rng: np.random.Generator,
    speed: float | None = None,
) -> list[Scatterer]:
    """Draw a torso + limb scatterer set whose ranges follow ``state``.

    Element 0 is always the torso (amplitude 1).  Every scatterer rides on the
    torso track plus a fixed body-depth offset and a micro-motion sinusoid.
    ``speed`` overrides the gross walking speed (m/s) of the walking states.
    """
    state = MotionState.parse(state)
    if state is MotionState.EMPTY:
        return []

    t = _slow_time(cfg)
    T = cfg.frame_duration
    n_scat = int(rng.integers(3, 9))

    # gross torso track plus per-state micro-motion ranges
    if state is MotionState.FACING_WALL:
        torso = np.full_like(t, rng.uniform(2.8, 3.2))
        f_mu, torso_amp, limb_amp = rng.uniform(1.5, 2.0), 0.01, (0.05, 0.15)
    elif state is MotionState.PARALLEL_TO_WALL:
        torso = np.full_like(t, rng.uniform(2.8, 3.2))
        f_mu, torso_amp, limb_amp = rng.uniform(0.2, 0.5), 0.005, (0.01, 0.03)
    elif state is MotionState.SQUAT_UP:
        torso = np.full_like(t, rng.uniform(2.8, 3.2))
        f_mu, torso_amp, limb_amp = rng.uniform(0.4, 0.6), rng.uniform(0.1, 0.2), (0.15, 0.3)
    elif state is MotionState.WALK_PARALLEL:
        v = rng.uniform(0.5, 0.75) if speed is None else speed
        d = rng.uniform(2.5, 3.5)
        x = (t - T / 2) * v * rng.choice([-1.0, 1.0])
        torso = np.sqrt(d**2 + x**2)
        f_mu, torso_amp, limb_amp = rng.uniform(1.6, 2.0), 0.01, (0.05, 0.2)
    elif state is MotionState.WALK_PERPENDICULAR:
        v = rng.uniform(0.6, 0.75) if speed is None else speed
        travel = v * T
        if travel > 3.0 + 1e-9:
            raise ValueError(f"speed {v} m/s leaves the 2-5 m walking zone within {T} s")
        slack = rng.uniform(0.0, 3.0 - travel)
        if rng.random() < 0.5:
            torso = 2.0 + slack + v * t
        else:
            torso = 5.0 - slack - v * t
        f_mu, torso_amp, limb_amp = rng.uniform(1.6, 2.0), 0.01, (0.1, 0.3)
    elif state is MotionState.DIAGONAL_ROUND_TRIP:
        near, far = rng.uniform(2.0, 2.5), rng.uniform(4.0, 4.8)
        tri = 1.0 - np.abs(2.0 * t / T - 1.0)
        torso = near + (far - near) * tri
        f_mu, torso_amp, limb_amp = rng.uniform(1.6, 2.0), 0.01, (0.1, 0.3)
    else:  # pragma: no cover - enum is exhaustive
        raise AssertionError(state)

    out = []
    for p in range(n_scat):
        if p == 0:
            amp, offset, swing = 1.0, 0.0, torso_amp
        else:
            amp = rng.uniform(0.2, 0.6)
            offset = rng.uniform(-0.1, 0.1)
            swing = rng.uniform(*limb_amp)
        phase = rng.uniform(0.0, 2 * np.pi) if p else 0.0
        r = torso + offset + swing * np.sin(2 * np.pi * f_mu * t + phase)
        out.append(Scatterer(amp, np.clip(r, *RANGE_LIMITS)))
    return out


def make_scene(
    state: "MotionState | str",
    cfg: RadarConfig,
    rng: np.random.Generator,
    wall_amplitude: float = 10.0,
    snr_db: float = math.inf,
) -> Scene:
    state = MotionState.parse(state)
    return Scene(state, generate_trajectory(state, cfg, rng), wall_amplitude, snr_db)


def target_delays(ranges: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    extra = cfg.wall_thickness * (math.sqrt(cfg.wall_eps_r) - 1.0)
    return 2.0 * (np.asarray(ranges) + extra) / SPEED_OF_LIGHT


def _scatterer_echo(scatterers: list[Scatterer], cfg: RadarConfig) -> np.ndarray:
    out = np.zeros((cfg.M, cfg.K), dtype=np.complex128)
    f = cfg.frequencies
    for s in scatterers:
        if s.ranges.shape != (cfg.M,):
            raise ValueError(f"trajectory has {s.ranges.shape[0]} samples, expected M = {cfg.M}")
        tau = target_delays(s.ranges, cfg)
        out += s.amplitude * np.exp(-2j * np.pi * np.outer(tau, f))
    return out


def wall_echo(cfg: RadarConfig, amplitude: float) -> np.ndarray:
    """Slow-time-constant wall return: direct bounce plus one 0.3x multipath replica."""
    if amplitude < 0:
        raise ValueError("wall amplitude must be non-negative")
    tau_w = 2.0 * cfg.wall_thickness * math.sqrt(cfg.wall_eps_r) / SPEED_OF_LIGHT
    f = cfg.frequencies
    row = np.exp(-2j * np.pi * f * tau_w) + MULTIPATH_RATIO * np.exp(-2j * np.pi * f * 2 * tau_w)
    return np.tile(amplitude * row, (cfg.M, 1))


def add_noise(echo: np.ndarray, snr_db: float, rng: np.random.Generator | None) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` below the mean signal power."""
    echo = np.asarray(echo, dtype=np.complex128)
    if echo.size == 0:
        raise ValueError("cannot add noise to an empty echo")
    if math.isinf(snr_db) and snr_db > 0:
        return echo.copy()
    p_sig = float(np.mean(np.abs(echo) ** 2))
    if p_sig == 0.0:
        raise ValueError("undefined SNR reference: input echo is all zero")
    if rng is None:
        raise ValueError("noise requested but no rng given")
    p_noise = p_sig / 10.0 ** (snr_db / 10.0)
    z = rng.standard_normal(echo.shape) + 1j * rng.standard_normal(echo.shape)
    return echo + z * math.sqrt(p_noise / 2.0)


def synthesize_echo(scene: Scene, cfg: RadarConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Full received frame for ``scene``; ``rng`` is only needed when noise is on."""
    echo = _scatterer_echo(scene.scatterers, cfg)
    if scene.wall_amplitude > 0:
        echo = echo + wall_echo(cfg, scene.wall_amplitude)
    return add_noise(echo, scene.snr_db, rng)


def clean_target(scene: Scene, cfg: RadarConfig) -> np.ndarray:
    """The training target: scatterer returns only, no wall and no noise."""
    return _scatterer_echo(scene.scatterers, cfg)
