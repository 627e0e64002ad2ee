"""Closed-form Doppler physics and photo-geometry relations.

Angles are in radians throughout.  Two angles describe a receiver seen from
a sweeping speaker:

* ``theta`` is measured from the direction of speaker motion, in [0, pi].
* ``alpha`` is measured from the camera's optical axis.  The sweep runs
  perpendicular to the axis, so ``alpha = |pi/2 - theta|``.  The signed
  variant ``pi/2 - theta`` is positive on the side the speaker moves toward
  (picture-left for a leftward sweep).

Two-sweep localization uses a fixed planar frame: the group centre is the
origin, sweep position A sits at ``(0, L)`` facing ``-y`` and sweep position
B sits at ``(-W, 0)`` facing ``+x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometry, DomainError, InconsistentMeasurement, NoSolution

SOUND_SPEED = 340.0
TONE_FREQUENCY = 20000.0
RECEIVER_NYQUIST = 22050.0
CAMERA_GAP = 0.095
DEFAULT_FOV = math.radians(70.0)
ARCCOS_EPS = 1e-6
PARALLEL_EPS = 1e-9


@dataclass(frozen=True)
class PhysicsConstants:
    sound_speed: float = SOUND_SPEED
    tone_frequency: float = TONE_FREQUENCY

    def __post_init__(self):
        if not self.sound_speed > 0:
            raise DomainError("sound_speed must be positive")
        if not 0 < self.tone_frequency < RECEIVER_NYQUIST:
            raise DomainError("tone_frequency must lie in (0, 22050) Hz")


@dataclass(frozen=True)
class SweepParams:
    peak_speed: float
    direction: tuple[float, float] = (-1.0, 0.0)
    gap: float = CAMERA_GAP
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not self.peak_speed > 0:
            raise DomainError("peak_speed must be positive")
        if abs(math.hypot(*self.direction) - 1.0) > 1e-9:
            raise DomainError("direction must be a unit vector")
        if self.gap < 0:
            raise DomainError("gap must be non-negative")
        if not 0 < self.fov < math.pi:
            raise DomainError("fov must lie in (0, pi)")


@dataclass(frozen=True)
class AngleResult:
    theta: float
    alpha: float
    side: str  # "left", "right" or "unknown"

    @property
    def signed_alpha(self) -> float:
        """Angle from the optical axis, positive toward the motion side."""
        return math.pi / 2 - self.theta


@dataclass(frozen=True)
class ResolutionParams:
    sample_rate: float
    fft_points: int

    def q(self, f0: float = TONE_FREQUENCY) -> float:
        """Dimensionless ratio Fs / (f0 * N_FFT)."""
        return self.sample_rate / (f0 * self.fft_points)


@dataclass(frozen=True)
class PlanarPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError("coordinates must be finite")


class VelocityTrace(NamedTuple):
    series: np.ndarray
    peak: float
    peak_index: int


def doppler_frequency(f0, c, v_sender_toward, v_receiver_toward=0.0):
    """Observed frequency for sender/receiver speeds along the line of sight."""
    if abs(v_sender_toward) >= c:
        raise DomainError(f"sender speed {v_sender_toward} m/s is not below c={c}")
    return (c + v_receiver_toward) / (c - v_sender_toward) * f0


def shift_for_geometry(theta, v_s, f0=TONE_FREQUENCY, c=SOUND_SPEED):
    """Frequency shift seen by a stationary receiver at ``theta`` from the motion."""
    return doppler_frequency(f0, c, v_s * math.cos(theta)) - f0


def angle_from_shift(observed_f, f0=TONE_FREQUENCY, c=SOUND_SPEED, v_s=3.4):
    """Invert the Doppler relation for the bearing of a stationary receiver.

    Raises InconsistentMeasurement when the shift implies |cos theta| > 1 + 1e-6.
    The side label assumes a leftward sweep.
    """
    if not v_s > 0:
        raise DomainError("sender speed must be positive")
    arg = (c / v_s) * (1.0 - f0 / observed_f)
    if abs(arg) > 1.0 + ARCCOS_EPS:
        raise InconsistentMeasurement(
            f"shift {observed_f - f0:+.2f} Hz exceeds what {v_s:.3f} m/s can produce"
        )
    theta = math.acos(min(1.0, max(-1.0, arg)))
    if observed_f > f0:
        side = "left"
    elif observed_f < f0:
        side = "right"
    else:
        side = "unknown"
    return AngleResult(theta=theta, alpha=abs(math.pi / 2 - theta), side=side)


def camera_corrected_angle(alpha, gap, distance, side_of_axis=None):
    """Bearing from the camera given the bearing ``alpha`` from the speaker.

    ``side_of_axis`` is "away_from_speaker" (adds gap/distance),
    "toward_speaker" (subtracts it) or None, in which case the variant with
    the larger angular error is returned.
    """
    if not 0 <= alpha < math.pi / 2:
        raise DomainError("alpha must lie in [0, pi/2)")
    if not distance > 0:
        raise DomainError("distance must be positive")
    ratio = gap / distance
    away = math.atan(math.tan(alpha) + ratio)
    toward = math.atan(math.tan(alpha) - ratio)
    if side_of_axis == "away_from_speaker":
        return away
    if side_of_axis == "toward_speaker":
        return toward
    if side_of_axis is not None:
        raise DomainError(f"unknown side {side_of_axis!r}")
    return away if abs(away - alpha) >= abs(toward - alpha) else toward


def integrate_velocity(accel: Sequence[float], v0: float = 0.0, dt: float = 0.01) -> VelocityTrace:
    """Running sum of accelerometer readings; peak is the first max of |v|."""
    a = np.asarray(accel, dtype=float)
    if a.size == 0:
        raise DomainError("no accelerometer samples")
    if not dt > 0:
        raise DomainError("dt must be positive")
    v = v0 + np.cumsum(a) * dt
    i = int(np.argmax(np.abs(v)))
    return VelocityTrace(v, float(abs(v[i])), i)


def _beta_bound(alpha, res, v_s, c, f0):
    q = res.q(f0)
    ca = math.cos(alpha)
    return (-q * c + v_s * ca * (1 + q)) / (v_s * (1 - q + q * v_s * ca / c))


def min_distinguishable_beta(alpha, res, v_s=3.4, c=SOUND_SPEED, f0=TONE_FREQUENCY):
    """Smallest neighbour angle whose shift differs from alpha's by one FFT bin."""
    if not 0 < alpha < math.pi:
        raise DomainError("alpha must lie in (0, pi)")
    if not v_s > 0:
        raise DomainError("sender speed must be positive")
    bound = _beta_bound(alpha, res, v_s, c, f0)
    if not -1.0 <= bound <= 1.0:
        raise NoSolution(f"no distinguishable beta for alpha={math.degrees(alpha):.2f} deg")
    return math.acos(bound)


def resolution_predicate(alpha, beta, res, v_s=3.4, c=SOUND_SPEED, f0=TONE_FREQUENCY):
    """True iff the two receivers' shifts are more than one FFT bin apart."""
    ca, cb = math.cos(alpha), math.cos(beta)
    if not ca > cb:
        raise DomainError("requires cos(alpha) > cos(beta)")
    bins = (1.0 / (c - v_s * ca) - 1.0 / (c - v_s * cb)) * c * f0 * res.fft_points / res.sample_rate
    return bins > 1.0


def undersampling_rate_valid(f_low, f_high, new_rate, n):
    """Bandpass sampling condition 2*fH/n <= Fs* <= 2*fL/(n-1)."""
    if not 0 < f_low < f_high:
        raise DomainError("requires 0 < f_low < f_high")
    if n < 1:
        raise DomainError("n must be >= 1")
    if n > math.floor(f_high / (f_high - f_low)):
        return False
    if new_rate < 2.0 * f_high / n:
        return False
    return n == 1 or new_rate <= 2.0 * f_low / (n - 1)


def alias_frequency(f, new_rate):
    """Fold ``f`` into [0, new_rate/2]; ``inverted`` marks odd Nyquist zones."""
    if not (f > 0 and new_rate > 0):
        raise DomainError("frequency and rate must be positive")
    r = math.fmod(f, new_rate)
    if r > new_rate / 2:
        return new_rate - r, True
    return r, False


def intersect_two_sweeps(alpha, beta, L, W):
    """Intersect the bearing line through A=(0, L) with the one through B=(-W, 0).

    ``alpha`` is the signed bearing from A (positive toward +x) and ``beta``
    the signed bearing from B (positive toward +y).  Lines are handled in
    direction-vector form so alpha = 0 (a vertical line) needs no special case.
    """
    if not (L > 0 and W > 0):
        raise DomainError("L and W must be positive")
    d1 = (math.sin(alpha), -math.cos(alpha))
    d2 = (math.cos(beta), math.sin(beta))
    # s*d1 - t*d2 = B - A
    det = -d1[0] * d2[1] + d2[0] * d1[1]
    if abs(det) < PARALLEL_EPS:
        raise DegenerateGeometry("bearing lines are parallel")
    bx, by = -W, -L
    s = (-bx * d2[1] + d2[0] * by) / det
    return PlanarPoint(d1[0] * s, L + d1[1] * s)


def sweep_frame_to_camera(point, L):
    """Map a two-sweep-frame point to camera-A coordinates (lateral, depth).

    Lateral is positive to picture-right; depth is the distance from A
    along its optical axis.
    """
    return PlanarPoint(-point.x, L - point.y)


def in_fov(alpha, fov=DEFAULT_FOV):
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    return alpha < fov / 2
