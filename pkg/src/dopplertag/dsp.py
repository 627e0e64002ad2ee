"""Receiver pipeline: recording in, Doppler shift estimate out.

bandpass (order-10 Butterworth, causal) -> keep every 7th sample -> 10 ms
Hann frames at 75% overlap, zero-padded 2048-point FFT -> tone detection ->
coarse shift against the stationary reference -> border search on a
full-record spectrum.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.signal as ss

from . import geometry as geo
from .errors import ConfigError, DomainError, ToneNotDetected
from .sim import Recording

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterSpec:
    order: int = 10
    center: float = 20000.0
    bandwidth: float = 2000.0

    @property
    def edges(self):
        return self.center - self.bandwidth / 2, self.center + self.bandwidth / 2


@dataclass(frozen=True)
class FrameSpec:
    frame_length: float = 0.010
    overlap: float = 0.75
    fft_points: int = 2048
    rate: float = 6300.0

    @property
    def samples(self) -> int:
        return int(round(self.frame_length * self.rate))

    @property
    def hop(self) -> int:
        return max(1, int(round(self.samples * (1 - self.overlap))))


@dataclass(frozen=True)
class DetectorConfig:
    """Tone-detection and refinement knobs.

    ``threshold`` compares in-band mean energy against the mean energy of the
    guard bands either side of the detection band; ``persistence`` is the
    number of consecutive tone-bearing frames that confirm a tone.
    ``tie_bins`` is how close (in frame bins) two shift magnitudes must be
    to count as a tie, resolved in favour of the earlier frame.
    """

    f0: float = geo.TONE_FREQUENCY
    detect_halfwidth: float = 500.0
    guard_width: float = 500.0
    threshold: float = 1.5
    persistence: int = 16
    reference_frames: int = 16
    smoothing: int = 5
    tie_bins: float = 0.1
    xi: float = 10.0
    border_fraction: float = 0.1
    decimation: int = 7


@dataclass(frozen=True)
class ShiftEstimate:
    name: str
    f0_local: float
    delta_f: float
    coarse_delta_f: float
    detected: bool
    peak_frame_index: int
    degraded: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class Spectrogram:
    power: np.ndarray  # frames x bins, |X|^2
    freqs: np.ndarray
    rate: float
    frames: FrameSpec
    gain: np.ndarray = field(default=None)  # |H|^2 of the front-end filter per bin

    def __post_init__(self):
        if self.gain is None:
            self.gain = np.ones_like(self.freqs)


@dataclass(frozen=True)
class Detection:
    f0_local: float
    coarse_delta_f: float
    peak_frame_index: int
    degraded: bool
    tone_frames: np.ndarray


def design_bandpass(spec: FilterSpec = FilterSpec(), rate: float = 44100.0) -> np.ndarray:
    """Butterworth bandpass as second-order sections.

    ``order`` is the prototype order, as in ``butter(order, band)``: the
    bandpass has ``order`` sections and 2*order poles.
    """
    lo, hi = spec.edges
    if not 0 < lo < hi < rate / 2:
        raise ConfigError(f"band {lo:.0f}-{hi:.0f} Hz is not inside (0, {rate / 2:.0f}) Hz")
    if spec.order < 1:
        raise ConfigError("bandpass order must be >= 1")
    return ss.butter(spec.order, [lo, hi], btype="band", fs=rate, output="sos")


def bandpass(rec: Recording, sos: np.ndarray) -> Recording:
    return Recording(ss.sosfilt(sos, rec.samples), rec.nominal_rate, rec.true_rate, rec.receiver_name)


def decimate(filtered: Recording, factor: int = 7) -> Recording:
    """Plain subsampling; the preceding bandpass is what keeps it alias-free."""
    if factor < 1:
        raise ConfigError("decimation factor must be >= 1")
    return Recording(np.asarray(filtered.samples)[::factor], filtered.nominal_rate / factor,
                     filtered.true_rate / factor, filtered.receiver_name)


def _hann(n):
    return np.hanning(n + 2)[1:-1]


def frame_spectra(decimated: Recording, frames: FrameSpec = FrameSpec()) -> Spectrogram:
    x = np.asarray(decimated.samples, dtype=float)
    L, hop = frames.samples, frames.hop
    if len(x) < L:
        raise DomainError(f"recording has {len(x)} samples, fewer than one {L}-sample frame")
    if frames.fft_points < L:
        raise ConfigError("fft_points must be at least the frame length")
    count = (len(x) - L) // hop + 1
    idx = np.arange(L)[None, :] + hop * np.arange(count)[:, None]
    X = np.fft.rfft(x[idx] * _hann(L), frames.fft_points)
    freqs = np.fft.rfftfreq(frames.fft_points, 1.0 / decimated.nominal_rate)
    return Spectrogram(np.abs(X) ** 2, freqs, decimated.nominal_rate, frames)


def folded_gain(sos, freqs, rate_in, rate_out, f0):
    """|H|^2 of the front-end filter at the input frequency behind each folded bin."""
    base, inverted = geo.alias_frequency(f0, rate_out)
    zone = round((f0 - base) / rate_out) if not inverted else round((f0 + base) / rate_out)
    orig = zone * rate_out - freqs if inverted else zone * rate_out + freqs
    _, h = ss.sosfreqz(sos, worN=orig, fs=rate_in)
    return np.abs(h) ** 2


def _peak_frequency(row, sel, freqs):
    """Peak bin inside ``sel`` with parabolic interpolation on the log spectrum."""
    b = np.flatnonzero(sel)
    j = b[np.argmax(row[b])]
    if 0 < j < len(row) - 1:
        a, m, c = np.log(row[j - 1:j + 2] + 1e-300)
        den = a - 2 * m + c
        p = 0.5 * (a - c) / den if den < 0 else 0.0
    else:
        p = 0.0
    return freqs[j] + p * (freqs[1] - freqs[0])


def _tone_flags(spec: Spectrogram, center, cfg: DetectorConfig):
    f, P = spec.freqs, spec.power / np.maximum(spec.gain, 1e-12)
    hw, gw = cfg.detect_halfwidth, cfg.guard_width
    band = (f >= center - hw) & (f <= center + hw)
    guard = ((f >= center - hw - gw) & (f < center - hw)) | ((f > center + hw) & (f <= center + hw + gw))
    ref = P[:, guard].mean(axis=1)
    inband = P[:, band].mean(axis=1)
    return (inband >= cfg.threshold * ref) & (inband > 0), band


def _first_run(flags, k):
    run = 0
    for i, v in enumerate(flags):
        run = run + 1 if v else 0
        if run >= k:
            return i - k + 1
    return None


def detect_and_extract(spec: Spectrogram, cfg: DetectorConfig = DetectorConfig()) -> Detection:
    """Tone detection, stationary reference and coarse (frame-peak) shift.

    A frame is tone-bearing when the mean energy in the detection band is at
    least ``threshold`` times the mean energy of the guard bands.  The tone
    is confirmed by a run of ``persistence`` tone-bearing frames; the
    reference frequency is the median peak of the first frames after the
    filter transient has passed.
    """
    nominal, _ = geo.alias_frequency(cfg.f0, spec.rate)
    flags, band = _tone_flags(spec, nominal, cfg)
    start = _first_run(flags, max(1, cfg.persistence))
    if start is None:
        raise ToneNotDetected("no run of tone-bearing frames")

    frames = spec.frames
    first = start + math.ceil(frames.samples / frames.hop) + 1
    bin_hz = spec.freqs[1] - spec.freqs[0]
    refs = np.array([_peak_frequency(spec.power[i], band, spec.freqs)
                         for i in range(first, min(first + cfg.reference_frames, len(flags)))])
    degraded = False
    if refs.size == 0 or np.median(np.abs(refs - np.median(refs))) > 2 * bin_hz:
        f0_local, degraded = nominal, True
    else:
        f0_local = float(np.median(refs))

    flags, band = _tone_flags(spec, f0_local, cfg)
    flags[:first] = False
    if not flags.any():
        raise ToneNotDetected("no tone-bearing frame after the reference")
    shifts = np.zeros(len(flags))
    for i in np.flatnonzero(flags):
        shifts[i] = _peak_frequency(spec.power[i], band, spec.freqs) - f0_local
    if cfg.smoothing > 1:
        # running median over neighbouring frames; silent frames count as zero shift
        shifts = ss.medfilt(shifts, 2 * (cfg.smoothing // 2) + 1)
    # magnitudes closer than a fraction of a bin are ties; the earliest frame wins
    mag = np.abs(shifts)
    k = int(np.flatnonzero(mag >= mag.max() - cfg.tie_bins * bin_hz)[0])
    return Detection(f0_local, float(shifts[k]), k, degraded, flags)


def refine_shift(decimated: Recording, coarse_delta_f, f0_local, xi=10.0, fraction=0.1, min_shift=0.0):
    """Border search on a full-record spectrum at true bin resolution.

    Starting from the strongest bin in [f0+coarse-xi, f0+coarse+xi], step
    away from f0 while the amplitude stays at or above ``fraction`` of that
    peak, never leaving the range.  Bins inside the main lobe of the
    stationary tone are excluded.  A coarse shift no larger than
    ``min_shift`` is returned as is: there is no shifted lobe to search.
    Returns ``(delta_f, degraded)``.
    """
    if not xi > 0:
        raise ConfigError("xi must be positive")
    if abs(coarse_delta_f) <= min_shift:
        return float(coarse_delta_f), False
    x = np.asarray(decimated.samples, dtype=float)
    n = len(x)
    nfft = 1 << max(11, math.ceil(math.log2(max(n, 1))))
    A = np.abs(np.fft.rfft(x * _hann(n), nfft))
    f = np.fft.rfftfreq(nfft, 1.0 / decimated.nominal_rate)
    lobe = 4.0 * decimated.nominal_rate / n  # full Hann main-lobe width
    lo, hi = f0_local + coarse_delta_f - xi, f0_local + coarse_delta_f + xi
    step = 1 if coarse_delta_f > 0 else -1
    if step > 0:
        lo = max(lo, f0_local + lobe)
    else:
        hi = min(hi, f0_local - lobe)
    sel = np.flatnonzero((f >= lo) & (f <= hi))
    if sel.size == 0:
        return float(coarse_delta_f), True
    j = sel[np.argmax(A[sel])]
    floor = fraction * A[j]
    while sel[0] <= j + step <= sel[-1] and A[j + step] >= floor:
        j += step
    return float(f[j] - f0_local), False


@dataclass(frozen=True)
class Pipeline:
    filter: FilterSpec = FilterSpec()
    frames: FrameSpec = FrameSpec()
    detector: DetectorConfig = DetectorConfig()


def process_recording(rec: Recording, config: Pipeline = Pipeline()) -> ShiftEstimate:
    cfg = config.detector
    sos = design_bandpass(config.filter, rec.nominal_rate)
    dec = decimate(bandpass(rec, sos), cfg.decimation)
    frames = FrameSpec(config.frames.frame_length, config.frames.overlap, config.frames.fft_points,
                       dec.nominal_rate)
    spec = frame_spectra(dec, frames)
    spec.gain = folded_gain(sos, spec.freqs, rec.nominal_rate, dec.nominal_rate, cfg.f0)
    det = detect_and_extract(spec, cfg)
    frame_bin = dec.nominal_rate / frames.fft_points
    delta, coarse_only = refine_shift(dec, det.coarse_delta_f, det.f0_local, cfg.xi, cfg.border_fraction,
                                      min_shift=frame_bin)
    if coarse_only:
        log.warning("%s: empty refinement range, keeping the coarse shift", rec.receiver_name)
    return ShiftEstimate(rec.receiver_name, det.f0_local, delta, det.coarse_delta_f, True,
                         det.peak_frame_index, det.degraded or coarse_only)
