"""Cepstral and generalized cross-correlation feature maps.

Lag sign convention (project-wide): ``gcc(a, b)`` peaks at a positive lag
``L`` when ``b`` is a copy of ``a`` delayed by ``L`` samples, i.e. positive
lag means channel A leads channel B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .propagation import ConfigurationError, LabeledRecording

SPECTRAL_FLOOR = 1e-12
PHAT_FLOOR = 1e-12

# Quefrency window reproducing 320 bins (31..350) at 250 kHz.
DEFAULT_QUEFRENCY_MIN = 31 / 250_000
DEFAULT_QUEFRENCY_MAX = 351 / 250_000
GCC_MARGIN = 0.03


class DegenerateInputError(ValueError):
    """Input carries no energy where a transform needs some."""


@dataclass(frozen=True)
class FramingConfig:
    frame_length: int
    hop: int
    fs: float
    window: str = "hann"

    def __post_init__(self):
        n = self.frame_length
        if n < 2 or n & (n - 1):
            raise ConfigurationError("frame_length must be a power of two")
        if not 0 < self.hop <= n:
            raise ConfigurationError("hop must satisfy 0 < hop <= frame_length")
        if self.window not in ("hann", "none"):
            raise ConfigurationError(f"unknown window {self.window!r}")

    @classmethod
    def for_rate(cls, fs: float, duration: float = 16384 / 250_000,
                 overlap: float = 0.5) -> "FramingConfig":
        """Power-of-two frame closest (in log scale) to ``duration`` seconds."""
        n = 2 ** int(round(math.log2(duration * fs)))
        return cls(frame_length=n, hop=max(1, int(n * (1 - overlap))), fs=fs)

    def taper(self) -> np.ndarray:
        if self.window == "hann":
            return np.hanning(self.frame_length)
        return np.ones(self.frame_length)


@dataclass(frozen=True)
class FeatureWindows:
    """Quefrency window (seconds) and GCC lag window for the feature maps."""

    q_min: float = DEFAULT_QUEFRENCY_MIN
    q_max: float = DEFAULT_QUEFRENCY_MAX
    spacing: float = 14.0
    sound_speed: float = 1500.0
    gcc_factor: int = 10
    gcc_margin: float = GCC_MARGIN
    weighting: str = "phat"

    def lag_half_width(self, fs: float) -> int:
        return gcc_half_width(self.spacing, self.sound_speed, fs, self.gcc_factor, self.gcc_margin)

    def max_lag(self, fs: float) -> float:
        return self.lag_half_width(fs) / fs

    def shapes(self, fs: float) -> tuple[tuple[int, int], tuple[int, int]]:
        start, stop = quefrency_bins(self.q_min, self.q_max, fs)
        n_lag = 2 * self.lag_half_width(fs)
        return (stop - start, 3), (-(-n_lag // self.gcc_factor), 2)


@dataclass
class CepstralMap:
    values: np.ndarray  # quefrency bins x channels
    quefrency_start: int
    quefrency_count: int
    fs: float


@dataclass
class GccMap:
    values: np.ndarray  # lag bins x pairs
    lag_span: float
    subsample_factor: int


@dataclass
class FeatureMaps:
    cepstral: CepstralMap
    gcc: GccMap
    timestamp: float
    label: Optional[tuple[float, float]] = None


def gcc_half_width(spacing: float, c: float, fs: float, factor: int,
                   margin: float = GCC_MARGIN) -> int:
    """Half-width of the GCC window in samples.

    Maximum physical lag plus ``margin``, rounded to the nearest multiple of
    ``factor`` so that the windowed vector sub-samples evenly.
    """
    raw = spacing / c * (1 + margin) * fs
    return factor * max(1, int(round(raw / factor)))


def quefrency_bins(q_min: float, q_max: float, fs: float) -> tuple[int, int]:
    """Half-open bin range [round(q_min*fs), round(q_max*fs))."""
    if not 0 < q_min < q_max:
        raise ConfigurationError(f"quefrency bounds out of order: {q_min}, {q_max}")
    return int(round(q_min * fs)), int(round(q_max * fs))


def power_cepstrum(frame, taper: Optional[np.ndarray] = None) -> np.ndarray:
    """Real cepstrum: inverse FFT of the floored log power spectrum."""
    x = np.asarray(frame, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("frame must be a 1-D array of length >= 2")
    if taper is not None:
        x = x * taper
    power = np.abs(np.fft.rfft(x)) ** 2
    peak = power.max()
    if peak <= 0:
        raise DegenerateInputError("cepstrum of an all-zero frame is undefined")
    return np.fft.irfft(np.log(np.maximum(power, SPECTRAL_FLOOR * peak)), len(x))


def lifter(cepstrum, q_min: float, q_max: float, fs: float) -> np.ndarray:
    cepstrum = np.asarray(cepstrum)
    start, stop = quefrency_bins(q_min, q_max, fs)
    if q_max >= len(cepstrum) / fs / 2:
        raise ConfigurationError("q_max must be below half the frame duration")
    return cepstrum[start:stop]


def gcc(frame_a, frame_b, weighting: str = "phat") -> np.ndarray:
    """Circular generalized cross-correlation with lag 0 at index n // 2."""
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("frames must be 1-D and of equal length")
    n = len(a)
    cross = np.conj(np.fft.rfft(a)) * np.fft.rfft(b)
    if weighting == "phat":
        mag = np.abs(cross)
        peak = mag.max()
        if peak <= 0:
            raise DegenerateInputError("PHAT weighting of a zero-energy frame")
        cross = cross / np.maximum(mag, PHAT_FLOOR * peak)
    elif weighting != "none":
        raise ConfigurationError(f"unknown GCC weighting {weighting!r}")
    return np.fft.fftshift(np.fft.irfft(cross, n))


def window_gcc(gcc_vec, half_width: int) -> np.ndarray:
    """Lags in [-half_width, half_width) from a centered GCC vector."""
    gcc_vec = np.asarray(gcc_vec)
    center = len(gcc_vec) // 2
    if half_width > center:
        raise ConfigurationError("GCC window exceeds half the frame length")
    return gcc_vec[center - half_width:center + half_width]


def block_max_magnitude(x, factor: int) -> np.ndarray:
    """Per block of ``factor`` bins keep the value of largest magnitude, sign intact."""
    x = np.asarray(x)
    if factor < 1:
        raise ConfigurationError("factor must be >= 1")
    if factor == 1:
        return x.copy()
    n_blocks = -(-x.shape[0] // factor)
    padded = np.zeros((n_blocks * factor,) + x.shape[1:], dtype=x.dtype)
    padded[:x.shape[0]] = x
    blocks = padded.reshape((n_blocks, factor) + x.shape[1:])
    idx = np.abs(blocks).argmax(axis=1)
    return np.take_along_axis(blocks, idx[:, None], axis=1)[:, 0]


def window_and_subsample_gcc(gcc_vec, max_lag: float, fs: float, factor: int) -> np.ndarray:
    half = int(round(max_lag * fs))
    return block_max_magnitude(window_gcc(gcc_vec, half), factor)


def frame_starts(n_samples: int, framing: FramingConfig) -> np.ndarray:
    if n_samples < framing.frame_length:
        return np.zeros(0, dtype=int)
    return np.arange(0, n_samples - framing.frame_length + 1, framing.hop)


def nearest_label(recording: LabeledRecording, t: float) -> tuple[float, float]:
    i = int(np.argmin(np.abs(recording.label_times - t)))
    return float(recording.label_range[i]), float(recording.label_bearing[i])


def iter_frames(recording: LabeledRecording, framing: FramingConfig) -> Iterator[tuple[float, np.ndarray]]:
    """(center timestamp, channels x frame_length) pairs."""
    n = framing.frame_length
    t0 = recording.label_times[0]
    for s in frame_starts(recording.samples.shape[1], framing):
        yield t0 + (s + n / 2) / recording.fs, recording.samples[:, s:s + n]


def frame_features(frame: np.ndarray, fs: float, framing: FramingConfig,
                   windows: FeatureWindows) -> tuple[np.ndarray, np.ndarray]:
    """Cepstral (quefrency x 3) and GCC (lag x 2) arrays for one 3-channel frame."""
    taper = framing.taper()
    tapered = frame * taper
    start, stop = quefrency_bins(windows.q_min, windows.q_max, fs)
    cep = np.stack([power_cepstrum(ch)[start:stop] for ch in tapered], axis=1)
    half = windows.lag_half_width(fs)
    pairs = []
    for a, b in ((0, 1), (1, 2)):
        g = gcc(tapered[a], tapered[b], windows.weighting)
        pairs.append(block_max_magnitude(window_gcc(g, half), windows.gcc_factor))
    return cep, np.stack(pairs, axis=1)


def feature_maps(recording: LabeledRecording, framing: FramingConfig,
                 windows: FeatureWindows, max_range: Optional[float] = None) -> list[FeatureMaps]:
    if recording.n_channels != 3:
        raise ConfigurationError(f"expected 3 channels, got {recording.n_channels}")
    fs = recording.fs
    if framing.fs != fs:
        raise ConfigurationError(f"framing fs {framing.fs} != recording fs {fs}")
    start, stop = quefrency_bins(windows.q_min, windows.q_max, fs)
    if windows.q_max >= framing.frame_length / fs / 2:
        raise ConfigurationError("q_max must be below half the frame duration")
    lag_span = windows.max_lag(fs)
    out = []
    for t, frame in iter_frames(recording, framing):
        label = nearest_label(recording, t)
        if max_range is not None and label[0] > max_range:
            continue
        cep, g = frame_features(frame, fs, framing, windows)
        out.append(FeatureMaps(
            cepstral=CepstralMap(cep, start, stop - start, fs),
            gcc=GccMap(g, lag_span, windows.gcc_factor),
            timestamp=t, label=label))
    return out
