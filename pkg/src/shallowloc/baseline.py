"""Classical localization: GCC peak picking and wavefront-curvature ranging.

Sensors sit on the x axis at -d, 0, +d. With ``a = r1 - r2`` and
``b = r2 - r3`` (path-length differences) the center-sensor range and the
axial source coordinate follow in closed form:

    r2 = (2 d^2 - a^2 - b^2) / (2 (a - b))
    x  = (a (2 r2 + a) - d^2) / (2 d)

and the bearing from the +x axis is ``atan2(sqrt(r2^2 - x^2), x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .features import FeatureWindows, FramingConfig, gcc, window_gcc

MAX_VALID_RANGE = 1000.0
FAR_FIELD_EPS = 1e-6


@dataclass
class TdoaEstimate:
    tau: float
    peak_value: float
    pair: Optional[tuple[int, int]] = None
    confident: bool = True


@dataclass
class Fix:
    range: float
    bearing: float
    valid: bool
    method: str = "baseline"
    diagnostic: str = ""


def parabolic_offset(y_left: float, y_peak: float, y_right: float) -> float:
    """Vertex offset, in bins, of the parabola through three equally spaced samples."""
    denom = y_left - 2 * y_peak + y_right
    if denom >= 0:
        return 0.0
    return 0.5 * (y_left - y_right) / denom


def pick_tdoa(gcc_vec, fs: float, pair: Optional[tuple[int, int]] = None) -> TdoaEstimate:
    """Sub-sample lag of the GCC maximum; lag 0 sits at index ``len // 2``.

    Ties go to the candidate with the smallest absolute lag and mark the
    estimate as not confident.
    """
    g = np.asarray(gcc_vec, dtype=float)
    center = len(g) // 2
    peak = g.max()
    candidates = np.flatnonzero(g == peak)
    confident = len(candidates) == 1
    k = int(candidates[np.argmin(np.abs(candidates - center))])
    offset = 0.0
    if confident and 0 < k < len(g) - 1:
        offset = parabolic_offset(g[k - 1], g[k], g[k + 1])
    return TdoaEstimate(tau=(k - center + offset) / fs, peak_value=float(peak),
                        pair=pair, confident=confident)


def wavefront_curvature_fix(tau12: float, tau23: float, spacing: float, c: float) -> Fix:
    if spacing <= 0 or c <= 0:
        raise ValueError("spacing and sound speed must be positive")
    d = spacing
    a = c * tau12
    b = c * tau23
    if abs(a) > d or abs(b) > d:
        return Fix(math.nan, math.nan, False, diagnostic="non-physical TDOA (|c*tau| > spacing)")
    if abs(a - b) <= FAR_FIELD_EPS:
        bearing = math.acos(min(1.0, max(-1.0, (a + b) / (2 * d))))
        return Fix(math.inf, bearing, False, diagnostic="far-field: no wavefront curvature")
    r2 = (2 * d * d - a * a - b * b) / (2 * (a - b))
    x = (a * (2 * r2 + a) - d * d) / (2 * d)
    if r2 <= 0:
        return Fix(r2, math.nan, False, diagnostic="non-positive range")
    if abs(x) > r2:
        return Fix(r2, math.nan, False, diagnostic="axial coordinate exceeds range")
    bearing = math.atan2(math.sqrt(r2 * r2 - x * x), x)
    if r2 > MAX_VALID_RANGE:
        return Fix(r2, bearing, False, diagnostic="range beyond validity limit")
    return Fix(r2, bearing, True)


def frame_tdoas(frame: np.ndarray, fs: float, half_width: int, weighting: str = "phat",
                taper: Optional[np.ndarray] = None) -> tuple[TdoaEstimate, TdoaEstimate]:
    """tau12 and tau23 (arrival time differences, seconds) from one 3-channel frame."""
    if taper is not None:
        frame = frame * taper
    out = []
    for a, b in ((0, 1), (1, 2)):
        est = pick_tdoa(window_gcc(gcc(frame[a], frame[b], weighting), half_width), fs, (a, b))
        # gcc lag is the delay of b relative to a, i.e. t_b - t_a
        est.tau = -est.tau
        out.append(est)
    return out[0], out[1]


def baseline_localize(frames: Iterable[np.ndarray], fs: float, spacing: float, c: float,
                      framing: FramingConfig, windows: FeatureWindows) -> list[Fix]:
    """One curvature fix per raw 3-channel frame; invalid fixes are kept."""
    half = int(round(spacing / c * (1 + windows.gcc_margin) * fs))
    taper = framing.taper()
    fixes = []
    for frame in frames:
        t12, t23 = frame_tdoas(frame, fs, half, windows.weighting, taper)
        fixes.append(wavefront_curvature_fix(t12.tau, t23.tau, spacing, c))
    return fixes
