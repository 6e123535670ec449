"""Echo matrix -> range profiles -> MTI -> RTM / DTM pseudo-colour images."""

from __future__ import annotations

import numpy as np
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from .core import RadarConfig, ShapeError
from .nn import resize2d

DB_RANGE = 40.0
DB_FLOOR = 1e-12
IMAGE_SIZE = 64
STFT_WINDOW = 32
STFT_HOP = 4

# piecewise-linear pseudo-colour control points (t -> r, g, b)
COLORMAP_T = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_RGB = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.0, 1.0, 0.5],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)


def range_profile(echo: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Zero-padded length-N inverse DFT of every slow-time row (1/N scaling)."""
    echo = np.asarray(echo)
    if echo.ndim != 2:
        raise ShapeError(f"echo must be M x K, got shape {echo.shape}")
    if echo.shape[1] > cfg.N:
        raise ShapeError(f"K = {echo.shape[1]} exceeds the range grid N = {cfg.N}")
    return np.fft.ifft(echo, n=cfg.N, axis=1)


def mti(profile: np.ndarray) -> np.ndarray:
    """Two-pulse canceller: row m of the output is row m+1 minus row m."""
    profile = np.asarray(profile)
    if profile.ndim != 2 or profile.shape[0] < 2:
        raise ValueError(f"MTI needs at least 2 slow-time rows, got shape {profile.shape}")
    return profile[1:] - profile[:-1]


def peak_db(mag: np.ndarray) -> float:
    return float(20.0 * np.log10(np.max(mag) + DB_FLOOR))


def normalized_intensity(mag: np.ndarray, ref_db: float | None = None) -> np.ndarray:
    """dB-compress a magnitude map into [0, 1] over a 40 dB window below the peak.

    ``ref_db`` pins the peak to an external value (used to render a subspace
    with its parent frame's normalization).  An all-zero map with no reference
    maps to 0 everywhere.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if ref_db is None:
        if not np.any(mag):
            return np.zeros_like(mag)
        ref_db = peak_db(mag)
    db = 20.0 * np.log10(mag + DB_FLOOR)
    lo = ref_db - DB_RANGE
    return (np.clip(db, lo, ref_db) - lo) / DB_RANGE


def colormap(t: np.ndarray) -> np.ndarray:
    """Pseudo-colour lookup of an HxW map in [0,1] -> 3xHxW RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(t, COLORMAP_T, COLORMAP_RGB[:, c]) for c in range(3)])


def render(intensity: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    img = resize2d(colormap(intensity), size, size)
    return np.clip(img, 0.0, 1.0)


def rtm_magnitude(phi: np.ndarray, cfg: RadarConfig) -> np.ndarray:
    """Gated |phi| arranged range x slow time."""
    phi = np.asarray(phi)
    if phi.size == 0:
        raise ValueError("empty MTI matrix")
    gate = cfg.gate_bins()
    if gate.size == 0:
        raise ValueError("no bins in range gate")
    return np.abs(phi[:, gate]).T


def build_rtm(
    phi: np.ndarray, cfg: RadarConfig, ref_db: float | None = None, size: int = IMAGE_SIZE
) -> np.ndarray:
    """Range-time map: H = range (near to far), W = slow time."""
    return render(normalized_intensity(rtm_magnitude(phi, cfg), ref_db), size)


def hilbert(x: np.ndarray) -> np.ndarray:
    """Analytic signal of a real sequence (FFT construction)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError("hilbert needs at least 4 samples")
    return scipy.signal.hilbert(x, axis=-1)


def stft_frequencies(cfg: RadarConfig, window: int = STFT_WINDOW) -> np.ndarray:
    """Zero-centred Doppler axis (Hz) of :func:`dtm_spectrogram` rows."""
    return (np.arange(window) - window // 2) * cfg.prf / window


def dtm_spectrogram(
    phi: np.ndarray, cfg: RadarConfig, window: int = STFT_WINDOW, hop: int = STFT_HOP
) -> np.ndarray:
    """Mean STFT magnitude over gated range bins, Doppler (zero-centred) x frames."""
    phi = np.asarray(phi)
    gate = cfg.gate_bins()
    if gate.size == 0:
        raise ValueError("no bins in range gate")
    seq = phi[:, gate].T  # bins x slow time
    if seq.shape[1] < window:
        raise ValueError(f"{seq.shape[1]} slow-time samples is shorter than the {window}-sample window")
    n = np.arange(window)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / window)
    frames = sliding_window_view(seq, window, axis=1)[:, ::hop]  # bins x frames x window
    spectrum = np.fft.fftshift(np.fft.fft(frames * hann, axis=-1), axes=-1)
    return np.abs(spectrum).mean(axis=0).T


def build_dtm(
    phi: np.ndarray, cfg: RadarConfig, ref_db: float | None = None, size: int = IMAGE_SIZE
) -> np.ndarray:
    """Doppler-time map: H = Doppler (negative to positive), W = slow time."""
    return render(normalized_intensity(dtm_spectrogram(phi, cfg), ref_db), size)
