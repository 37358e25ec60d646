"""Shallow-water multipath simulator.

Image-source propagation between flat pressure-release / reflecting
boundaries, band-limited vessel noise synthesis, and piecewise-stationary
transit simulation over a three-element collinear hydrophone array.

Coordinates are (x, y, depth) in meters with depth positive downward from
the sea surface. The array lies along the x axis, centered at x = y = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LABEL_CADENCE = 0.1
FRACTIONAL_DELAY_TAPS = 64


class DomainError(ValueError):
    """A position or parameter lies outside the modeled domain."""


class ConfigurationError(ValueError):
    """An inconsistent or unusable configuration was supplied."""


@dataclass(frozen=True)
class EnvironmentModel:
    water_depth: float = 30.0
    sound_speed: float = 1500.0
    surface_reflection: float = -1.0
    bottom_reflection: float = 0.7
    max_image_order: int = 2

    def __post_init__(self):
        if self.water_depth <= 0:
            raise ConfigurationError("water_depth must be positive")
        if self.sound_speed <= 0:
            raise ConfigurationError("sound_speed must be positive")
        if abs(self.surface_reflection) > 1 or abs(self.bottom_reflection) > 1:
            raise ConfigurationError("reflection coefficients must satisfy |R| <= 1")
        if self.max_image_order < 0:
            raise ConfigurationError("max_image_order must be >= 0")


@dataclass(frozen=True)
class SensorArray:
    spacing: float = 14.0
    height_above_floor: float = 1.0
    count: int = 3

    def __post_init__(self):
        if self.count != 3:
            raise ConfigurationError("only three-element arrays are supported")
        if self.spacing <= 0 or self.height_above_floor <= 0:
            raise ConfigurationError("spacing and height_above_floor must be positive")

    def positions(self, env: EnvironmentModel) -> np.ndarray:
        """Sensor coordinates (3 x 3), sensor 1 at x = -spacing."""
        depth = env.water_depth - self.height_above_floor
        xs = np.array([-self.spacing, 0.0, self.spacing])
        return np.column_stack([xs, np.zeros(3), np.full(3, depth)])


@dataclass(frozen=True)
class SourceSpec:
    band: tuple[float, float] = (100.0, 10000.0)
    slope_db_per_octave: float = -3.0
    source_level: float = 150.0
    tonals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        lo, hi = self.band
        if not 0 < lo < hi:
            raise ConfigurationError(f"invalid band edges {self.band}")
        if not math.isfinite(self.source_level):
            raise ConfigurationError("source_level must be finite")


@dataclass(frozen=True)
class TransitPlan:
    """Source track as time-stamped waypoints; positions interpolate linearly."""

    times: tuple[float, ...]
    positions: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if len(self.times) == 0:
            raise ConfigurationError("transit plan is empty")
        if len(self.times) != len(self.positions):
            raise ConfigurationError("times and positions differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("waypoint times must be strictly increasing")

    @property
    def duration(self) -> float:
        return self.times[-1] - self.times[0]

    def position_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        if len(self.times) == 1:
            return np.broadcast_to(pos[0], t.shape + (3,)).copy()
        return np.stack([np.interp(t, self.times, pos[:, k]) for k in range(3)], axis=-1)

    @classmethod
    def stationary(cls, position, duration: float) -> "TransitPlan":
        p = tuple(float(v) for v in position)
        return cls(times=(0.0, float(duration)), positions=(p, p))

    @classmethod
    def straight(cls, cpa_offset: float, heading: float, speed: float,
                 max_range: float = 500.0, depth: float = 1.0) -> "TransitPlan":
        """Straight inbound/outbound track starting and ending at ``max_range``.

        ``heading`` is the track direction in radians from the +x (array) axis;
        ``cpa_offset`` is the signed perpendicular miss distance.
        """
        if abs(cpa_offset) >= max_range:
            raise ConfigurationError("cpa_offset must be smaller than max_range")
        if speed <= 0:
            raise ConfigurationError("speed must be positive")
        u = np.array([math.cos(heading), math.sin(heading)])
        n = np.array([-u[1], u[0]])
        half = math.sqrt(max_range**2 - cpa_offset**2)
        start = cpa_offset * n - half * u
        end = cpa_offset * n + half * u
        return cls(times=(0.0, 2 * half / speed),
                   positions=((start[0], start[1], depth), (end[0], end[1], depth)))


@dataclass
class MultipathImpulse:
    delays: np.ndarray
    amplitudes: np.ndarray

    def __len__(self):
        return len(self.delays)


@dataclass
class LabeledRecording:
    samples: np.ndarray  # channels x time
    fs: float
    label_times: np.ndarray
    label_range: np.ndarray
    label_bearing: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


def _check_in_water(env: EnvironmentModel, pos, what: str):
    z = pos[2]
    if not 0 < z < env.water_depth:
        raise DomainError(f"{what} depth {z} m outside water column (0, {env.water_depth})")


def image_sources(env: EnvironmentModel, source_pos) -> list[tuple[float, float]]:
    """(image depth, coefficient product) for every path up to max_image_order.

    Order n has two images: one whose first boundary hit is the surface and
    one starting at the bottom. Bounces alternate between boundaries.
    """
    zs = float(source_pos[2])
    D = env.water_depth
    rs, rb = env.surface_reflection, env.bottom_reflection
    images = [(zs, 1.0)]
    for order in range(1, env.max_image_order + 1):
        for first in ("surface", "bottom"):
            z = zs
            coef = 1.0
            boundary = first
            for _ in range(order):
                if boundary == "surface":
                    z = -z
                    coef *= rs
                    boundary = "bottom"
                else:
                    z = 2 * D - z
                    coef *= rb
                    boundary = "surface"
            images.append((z, coef))
    return images


def image_paths(env: EnvironmentModel, source_pos, sensor_pos) -> MultipathImpulse:
    source_pos = np.asarray(source_pos, dtype=float)
    sensor_pos = np.asarray(sensor_pos, dtype=float)
    _check_in_water(env, source_pos, "source")
    _check_in_water(env, sensor_pos, "sensor")
    horiz2 = float(np.sum((source_pos[:2] - sensor_pos[:2]) ** 2))
    if horiz2 + (source_pos[2] - sensor_pos[2]) ** 2 < 1e-12:
        raise DomainError("source and sensor coincide")
    lengths = []
    amps = []
    for z_img, coef in image_sources(env, source_pos):
        length = math.sqrt(horiz2 + (z_img - sensor_pos[2]) ** 2)
        lengths.append(length)
        amps.append(coef / length)
    lengths = np.array(lengths)
    amps = np.array(amps)
    # stable sort keeps the direct path first on exact ties
    order = np.argsort(lengths, kind="stable")
    return MultipathImpulse(delays=lengths[order] / env.sound_speed, amplitudes=amps[order])


def synthesize_source(spec: SourceSpec, duration: float, fs: float, seed: int) -> np.ndarray:
    """Gaussian broadband noise with a power-law spectrum plus optional tonals.

    Levels are dB re 1 uPa at 1 m; the output is pressure in Pa.
    """
    if duration <= 0:
        raise ConfigurationError("duration must be positive")
    lo, hi = spec.band
    if hi >= fs / 2:
        raise ConfigurationError(f"band edge {hi} Hz must lie below fs/2 = {fs / 2} Hz")
    n = int(round(duration * fs))
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1 / fs)
    in_band = (freqs >= lo) & (freqs <= hi)
    shape = np.zeros_like(freqs)
    exponent = spec.slope_db_per_octave / (20 * math.log10(2))
    shape[in_band] = (freqs[in_band] / lo) ** exponent
    x = np.fft.irfft(spectrum * shape, n)
    x -= x.mean()
    rms = np.sqrt(np.mean(x**2))
    target = 1e-6 * 10 ** (spec.source_level / 20)
    x *= target / rms
    if spec.tonals:
        t = np.arange(n) / fs
        for freq, level in spec.tonals:
            if not 0 < freq < fs / 2:
                raise ConfigurationError(f"tonal {freq} Hz outside (0, fs/2)")
            amp = math.sqrt(2) * 1e-6 * 10 ** (level / 20)
            x += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        x -= x.mean()
    return x


def fractional_delay_kernel(frac: float, taps: int = FRACTIONAL_DELAY_TAPS) -> np.ndarray:
    """Blackman-windowed sinc for a delay of ``frac`` in [0, 1) samples.

    Tap ``j`` (offset ``j - taps//2 + 1``) multiplies ``x[n - floor(D) - offset]``.
    For ``frac == 0`` the kernel is an exact unit impulse.
    """
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1) - frac
    w = 0.42 + 0.5 * np.cos(np.pi * offsets / half) + 0.08 * np.cos(2 * np.pi * offsets / half)
    return np.sinc(offsets) * w


def _delayed(x: np.ndarray, start: int, delay: float, m0: int, m1: int, taps: int) -> np.ndarray:
    """x(m - delay) for output indices m0 <= m < m1, where x[start] is time zero.

    Samples outside ``x`` are treated as zero.
    """
    di = int(math.floor(delay))
    h = fractional_delay_kernel(delay - di, taps)
    half = taps // 2
    # output m needs x at (start + m - di - offset), offset in [-half+1, half]
    lo = start + m0 - di - half
    hi = start + m1 - 1 - di + half - 1
    idx_lo, idx_hi = max(lo, 0), min(hi + 1, len(x))
    seg = np.zeros(hi - lo + 1)
    if idx_hi > idx_lo:
        seg[idx_lo - lo:idx_hi - lo] = x[idx_lo:idx_hi]
    # convolution with h ordered by offset ascending: y[m] = sum_j h[j] seg[p - j]
    return np.convolve(seg, h, mode="valid")


def propagate(source_waveform, impulse: MultipathImpulse, fs: float,
              taps: int = FRACTIONAL_DELAY_TAPS) -> np.ndarray:
    """Sum of delayed, scaled copies of the source; output has the input length."""
    x = np.asarray(source_waveform, dtype=float)
    y = np.zeros(len(x))
    for delay, amp in zip(impulse.delays, impulse.amplitudes):
        y += amp * _delayed(x, 0, delay * fs, 0, len(x), taps)
    return y


def geometry_labels(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal range from the array center and bearing from +x folded to [0, pi]."""
    x, y = positions[..., 0], positions[..., 1]
    return np.hypot(x, y), np.arctan2(np.abs(y), x)


def simulate_transit(plan: TransitPlan, spec: SourceSpec, env: EnvironmentModel,
                     array: SensorArray, fs: float, snr_db: float, seed: int,
                     taps: int = FRACTIONAL_DELAY_TAPS) -> LabeledRecording:
    """Render a labeled 3-channel recording of a source following ``plan``.

    The channel impulse response is recomputed at every label time and the
    rendered segments are blended with triangular (linear) cross-fades, so
    the weights form a partition of unity between label instants.
    """
    if plan is None or len(plan.times) == 0:
        raise ConfigurationError("transit plan is empty")
    sensors = array.positions(env)
    n_labels = int(math.floor(plan.duration / LABEL_CADENCE + 1e-9)) + 1
    label_times = plan.times[0] + LABEL_CADENCE * np.arange(n_labels)
    src_pos = plan.position_at(label_times)
    for p in src_pos:
        _check_in_water(env, p, "source")
    n_out = int(round((label_times[-1] - label_times[0]) * fs)) + 1

    impulses = [[image_paths(env, p, s) for s in sensors] for p in src_pos]
    max_delay = max(imp.delays[-1] for row in impulses for imp in row)
    pad = int(math.ceil(max_delay * fs)) + taps + 16

    ss = np.random.SeedSequence(seed)
    src_seed, noise_seed = ss.spawn(2)
    src = synthesize_source(spec, (n_out + pad) / fs, fs, int(src_seed.generate_state(1)[0]))
    start = pad

    marks = np.round((label_times - label_times[0]) * fs).astype(int)
    out = np.zeros((3, n_out))
    for i in range(n_labels):
        m0 = marks[i - 1] if i > 0 else 0
        m1 = marks[i + 1] if i + 1 < n_labels else n_out
        m = np.arange(m0, m1)
        w = np.ones(len(m))
        if i > 0:
            rise = m < marks[i]
            w[rise] = (m[rise] - marks[i - 1]) / (marks[i] - marks[i - 1])
        if i + 1 < n_labels:
            fall = m > marks[i]
            w[fall] = (marks[i + 1] - m[fall]) / (marks[i + 1] - marks[i])
        for ch in range(3):
            imp = impulses[i][ch]
            seg = np.zeros(len(m))
            for delay, amp in zip(imp.delays, imp.amplitudes):
                seg += amp * _delayed(src, start, delay * fs, m0, m1, taps)
            out[ch, m0:m1] += w * seg

    if math.isfinite(snr_db):
        cpa = min(imp.delays[0] for row in impulses for imp in row) * env.sound_speed
        signal_power = np.mean(src**2) / cpa**2
        sigma = math.sqrt(signal_power / 10 ** (snr_db / 10))
        rng = np.random.default_rng(noise_seed)
        out += sigma * rng.standard_normal(out.shape)

    rng_, brg = geometry_labels(src_pos)
    return LabeledRecording(samples=out, fs=fs, label_times=label_times,
                            label_range=rng_, label_bearing=brg,
                            metadata={"seed": int(seed), "snr_db": snr_db, "pad": pad})
