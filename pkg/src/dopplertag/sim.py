"""Seeded synthesis of sweep gestures, microphone recordings and ground truth.

Everything here works in the camera frame: the camera sits at the origin,
the optical axis is +y and picture-left is -x.  Scenes given in another
frame are mapped into it on construction.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.signal as ss

from . import geometry as geo
from .errors import ConfigError, SceneError, SimulationError
from .geometry import PlanarPoint

NOMINAL_RATE = 44100
ACCEL_RATE = 100.0
DEFAULT_MOTION_TIME = 0.3
DEFAULT_ACCEL_NOISE = 1.2
REFERENCE_DISTANCE = 3.0
TONE_AMPLITUDE = 0.1
NOISE_KINDS = ("ambient", "music", "conversation", "none")


@dataclass(frozen=True)
class Person:
    name: str
    position: PlanarPoint
    member: bool = True  # carries a phone in the tagging group


@dataclass(frozen=True)
class Scene:
    receivers: tuple[Person, ...]
    fov: float = geo.DEFAULT_FOV
    camera_position: PlanarPoint = PlanarPoint(0.0, 0.0)
    optical_axis: tuple[float, float] = (0.0, 1.0)
    rows_ground_truth: tuple[tuple[str, ...], ...] | None = None
    bystanders: tuple[Person, ...] = ()

    def __post_init__(self):
        if not self.receivers:
            raise SceneError("receivers", "at least one receiver is required")
        names = [p.name for p in self.people]
        seen = set()
        for n in names:
            if not n:
                raise SceneError("receivers", "empty name")
            if n in seen:
                raise SceneError("receivers", f"duplicate name {n!r}")
            seen.add(n)
        if abs(math.hypot(*self.optical_axis) - 1.0) > 1e-9:
            raise SceneError("optical_axis", "must be a unit vector")
        if not 0 < self.fov < math.pi:
            raise SceneError("fov", "must lie in (0, 180) degrees")
        if self.rows_ground_truth is not None:
            listed = [n for row in self.rows_ground_truth for n in row]
            members = {p.name for p in self.receivers}
            if len(listed) != len(set(listed)):
                raise SceneError("rows", "a name appears in more than one row")
            unknown = set(listed) - members
            if unknown:
                raise SceneError("rows", f"unknown receiver {sorted(unknown)[0]!r}")

    @property
    def people(self) -> tuple[Person, ...]:
        return self.receivers + self.bystanders

    @property
    def devices(self) -> tuple[Person, ...]:
        """Everyone who records audio and replies."""
        return self.receivers + tuple(p for p in self.bystanders if p.member)

    def local(self, p: PlanarPoint) -> PlanarPoint:
        """Camera-frame coordinates (lateral to picture-right, depth along the axis)."""
        ax, ay = self.optical_axis
        dx, dy = p.x - self.camera_position.x, p.y - self.camera_position.y
        return PlanarPoint(dx * ay - dy * ax, dx * ax + dy * ay)

    def position_of(self, name: str) -> PlanarPoint:
        for p in self.people:
            if p.name == name:
                return self.local(p.position)
        raise SceneError("receiver", f"no receiver named {name!r}")

    def camera_angle(self, name: str) -> float:
        """Signed bearing from the optical axis, positive toward picture-left."""
        p = self.position_of(name)
        return math.atan2(-p.x, p.y)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Scene":
        """Build a scene from its JSON form (metres, angles in degrees)."""
        if not isinstance(doc, Mapping):
            raise SceneError("$", "scene must be a JSON object")

        def point(value, where):
            if (not isinstance(value, (list, tuple)) or len(value) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
                raise SceneError(where, "expected [x, y] in metres")
            if not all(math.isfinite(v) for v in value):
                raise SceneError(where, "coordinates must be finite")
            return PlanarPoint(float(value[0]), float(value[1]))

        def people(key, member_default):
            items = doc.get(key, [])
            if not isinstance(items, list):
                raise SceneError(key, "expected a list")
            out = []
            for i, item in enumerate(items):
                where = f"{key}[{i}]"
                if not isinstance(item, Mapping):
                    raise SceneError(where, "expected an object")
                name = item.get("name")
                if not isinstance(name, str) or not name:
                    raise SceneError(f"{where}.name", "expected a nonempty string")
                member = item.get("member", member_default)
                if not isinstance(member, bool):
                    raise SceneError(f"{where}.member", "expected true or false")
                out.append(Person(name, point(item.get("position"), f"{where}.position"), member))
            return tuple(out)

        unknown = set(doc) - {"receivers", "bystanders", "fov_deg", "camera", "rows"}
        if unknown:
            raise SceneError(sorted(unknown)[0], "unknown field")
        if "receivers" not in doc:
            raise SceneError("receivers", "missing")
        kwargs = {"receivers": people("receivers", True), "bystanders": people("bystanders", True)}
        if "fov_deg" in doc:
            fov = doc["fov_deg"]
            if not isinstance(fov, (int, float)) or isinstance(fov, bool) or not 0 < fov < 180:
                raise SceneError("fov_deg", "expected a number in (0, 180)")
            kwargs["fov"] = math.radians(fov)
        cam = doc.get("camera", {})
        if not isinstance(cam, Mapping):
            raise SceneError("camera", "expected an object")
        if "position" in cam:
            kwargs["camera_position"] = point(cam["position"], "camera.position")
        if "heading_deg" in cam:
            h = cam["heading_deg"]
            if not isinstance(h, (int, float)) or isinstance(h, bool) or not math.isfinite(h):
                raise SceneError("camera.heading_deg", "expected a finite number")
            kwargs["optical_axis"] = (math.cos(math.radians(h)), math.sin(math.radians(h)))
        if "rows" in doc:
            rows = doc["rows"]
            if not isinstance(rows, list) or not all(
                    isinstance(r, list) and r and all(isinstance(n, str) for n in r) for r in rows):
                raise SceneError("rows", "expected a list of nonempty name lists")
            kwargs["rows_ground_truth"] = tuple(tuple(r) for r in rows)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        heading = math.degrees(math.atan2(self.optical_axis[1], self.optical_axis[0]))
        doc = {
            "fov_deg": math.degrees(self.fov),
            "camera": {"position": [self.camera_position.x, self.camera_position.y], "heading_deg": heading},
            "receivers": [{"name": p.name, "position": [p.position.x, p.position.y]} for p in self.receivers],
        }
        if self.bystanders:
            doc["bystanders"] = [
                {"name": p.name, "position": [p.position.x, p.position.y], "member": p.member}
                for p in self.bystanders
            ]
        if self.rows_ground_truth is not None:
            doc["rows"] = [list(r) for r in self.rows_ground_truth]
        return doc


@dataclass(frozen=True)
class SweepTrace:
    """A raised-cosine hand sweep: stationary lead-in, pulse centred mid-sweep.

    ``positions`` and ``velocities`` are sampled at ``sample_rate`` from the
    start of the lead-in; ``accel_readings`` are 100 Hz accelerometer samples.
    The speaker path is ``origin + direction * (positions - displacement/2)``
    so the gesture is centred on ``origin``.
    """

    v_peak: float
    duration: float
    lead_in: float
    motion_time: float
    sample_rate: float
    positions: np.ndarray
    velocities: np.ndarray
    accel_readings: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    direction: tuple[float, float] = (-1.0, 0.0)

    @property
    def total_time(self) -> float:
        return self.lead_in + self.duration

    @property
    def motion_start(self) -> float:
        return self.lead_in + (self.duration - self.motion_time) / 2

    @property
    def displacement(self) -> float:
        return self.v_peak * self.motion_time / 2

    def speed_at(self, t):
        tau = np.asarray(t, dtype=float) - self.motion_start
        inside = (tau >= 0) & (tau <= self.motion_time)
        return np.where(inside, self.v_peak * (1 - np.cos(2 * np.pi * tau / self.motion_time)) / 2, 0.0)

    def travel_at(self, t):
        tau = np.clip(np.asarray(t, dtype=float) - self.motion_start, 0.0, self.motion_time)
        T = self.motion_time
        return self.v_peak / 2 * (tau - T / (2 * np.pi) * np.sin(2 * np.pi * tau / T))

    def location_at(self, t):
        s = self.travel_at(t) - self.displacement / 2
        return self.origin[0] + self.direction[0] * s, self.origin[1] + self.direction[1] * s

    def placed(self, origin, direction) -> "SweepTrace":
        return SweepTrace(
            self.v_peak, self.duration, self.lead_in, self.motion_time, self.sample_rate,
            self.positions, self.velocities, self.accel_readings,
            (float(origin[0]), float(origin[1])), (float(direction[0]), float(direction[1])),
        )


def _flatten(keys, out):
    for k in keys:
        if isinstance(k, (list, tuple)):
            _flatten(k, out)
        elif isinstance(k, str):
            out.append(zlib.crc32(k.encode()))
        else:
            out.append(abs(int(k)))
    return out


def _rng(*keys) -> np.random.Generator:
    """Independent stream per (seed, receiver, sweep, purpose) key."""
    return np.random.default_rng(_flatten(keys, []))


def synthesize_sweep(v_peak, duration=1.0, lead_in=0.2, accel_noise_rms=DEFAULT_ACCEL_NOISE, seed=0,
                     motion_time=DEFAULT_MOTION_TIME, sample_rate=NOMINAL_RATE,
                     origin=(0.0, 0.0), direction=(-1.0, 0.0)) -> SweepTrace:
    """Raised-cosine speed pulse plus noisy 100 Hz accelerometer readings.

    Each reading is the mean acceleration over its 10 ms interval plus
    Gaussian error, so a noiseless trace integrates back to the exact speed.
    """
    if not v_peak > 0:
        raise ConfigError("v_peak must be positive")
    if not duration > 0:
        raise ConfigError("duration must be positive")
    if lead_in < 0:
        raise ConfigError("lead_in must be non-negative")
    if accel_noise_rms < 0:
        raise ConfigError("accel_noise_rms must be non-negative")
    motion_time = min(float(motion_time), float(duration))
    if not motion_time > 0:
        raise ConfigError("motion_time must be positive")
    probe = SweepTrace(v_peak, duration, lead_in, motion_time, sample_rate,
                       np.empty(0), np.empty(0), np.empty(0), tuple(origin), tuple(direction))
    n = int(round((lead_in + duration) * sample_rate))
    t = np.arange(n) / sample_rate
    na = int(round((lead_in + duration) * ACCEL_RATE))
    ta = np.arange(na + 1) / ACCEL_RATE
    accel = np.diff(probe.speed_at(ta)) * ACCEL_RATE
    if accel_noise_rms > 0:
        accel = accel + _rng(seed, "accelerometer").normal(0.0, accel_noise_rms, na)
    return SweepTrace(v_peak, duration, lead_in, motion_time, sample_rate,
                      probe.travel_at(t), probe.speed_at(t), accel, tuple(origin), tuple(direction))


@dataclass(frozen=True)
class Tone:
    f0: float = geo.TONE_FREQUENCY
    bandwidth: float = 1000.0  # in-band SNR is measured over f0 +- bandwidth/2


@dataclass(frozen=True)
class ChannelParams:
    noise_kind: str = "ambient"
    target_snr_db: float = 10.0
    clock_offset_ppm: float | None = None  # None draws uniformly from +-30 ppm
    quantization: str = "pcm16"
    reference_distance: float = REFERENCE_DISTANCE
    tone_amplitude: float = TONE_AMPLITUDE
    sound_speed: float = geo.SOUND_SPEED

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}")
        if not math.isfinite(self.target_snr_db):
            raise ConfigError("target_snr_db must be finite")
        if self.clock_offset_ppm is not None and abs(self.clock_offset_ppm) > 200:
            raise ConfigError("|clock_offset_ppm| must not exceed 200")
        if self.quantization not in ("float", "pcm16"):
            raise ConfigError("quantization must be 'float' or 'pcm16'")
        if not (self.reference_distance > 0 and self.tone_amplitude > 0):
            raise ConfigError("reference distance and amplitude must be positive")

    @classmethod
    def quiet(cls, **kw) -> "ChannelParams":
        return cls(noise_kind="none", **kw)


@dataclass(frozen=True)
class Recording:
    samples: np.ndarray
    nominal_rate: float
    true_rate: float
    receiver_name: str

    def __len__(self):
        return len(self.samples)


def band_power(x, rate, lo, hi) -> float:
    """Mean power of ``x`` carried by frequencies in [lo, hi] (Parseval on the rfft)."""
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / rate)
    sel = (f >= lo) & (f <= hi)
    return float(2.0 * np.sum(np.abs(X[sel]) ** 2) / len(x) ** 2)


def _noise(kind, n, rate, rng):
    white = rng.standard_normal(n)
    if kind == "ambient":
        return white
    # low-frequency dominated: a gentle low-pass floor plus a weak broadband part
    corner = 3000.0 if kind == "music" else 800.0
    sos = ss.butter(2, corner, fs=rate, output="sos")
    return 3.0 * ss.sosfilt(sos, rng.standard_normal(n)) + white


def clock_offset_for(channel: ChannelParams, seed, name, sweep_id="A") -> float:
    if channel.clock_offset_ppm is not None:
        return float(channel.clock_offset_ppm)
    return float(_rng(seed, name, sweep_id, "clock").uniform(-30.0, 30.0))


def render_recording(scene: Scene, receiver_name: str, sweep: SweepTrace, tone: Tone = Tone(),
                     channel: ChannelParams = ChannelParams(), seed=0, sweep_id="A") -> Recording:
    """Microphone signal of one receiver during one sweep.

    The receiver clock runs at ``nominal*(1+ppm*1e-6)``; sample k is taken at
    true time k/true_rate.  The emitted tone is phase-continuous with
    instantaneous frequency f0*c/(c - v(t)*u(t)) where u(t) is the unit
    vector from the speaker to the receiver, and its amplitude falls as 1/d.
    """
    pos = scene.position_of(receiver_name)
    c = channel.sound_speed
    ppm = clock_offset_for(channel, seed, receiver_name, sweep_id)
    true_rate = NOMINAL_RATE * (1 + ppm * 1e-6)
    worst = geo.doppler_frequency(tone.f0, c, sweep.v_peak)
    if worst >= true_rate / 2:
        raise ConfigError("tone plus maximum shift exceeds the receiver Nyquist frequency")

    n = int(round(sweep.total_time * NOMINAL_RATE))
    sx0, sy0 = sweep.location_at(0.0)
    delay = math.hypot(pos.x - sx0, pos.y - sy0) / c
    te = np.arange(n) / true_rate - delay  # emission time of each received sample
    sx, sy = sweep.location_at(te)
    dx, dy = pos.x - sx, pos.y - sy
    d = np.hypot(dx, dy)
    if d.min() < 1e-3:
        raise SimulationError(f"receiver {receiver_name!r} coincides with the speaker path")
    v = sweep.speed_at(te)
    v_toward = v * (sweep.direction[0] * dx + sweep.direction[1] * dy) / d
    f = tone.f0 * c / (c - v_toward)
    # trapezoidal phase on the emission-time grid keeps the waveform continuous
    dt = 1.0 / true_rate
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) / 2) * dt])
    amp = channel.tone_amplitude * channel.reference_distance / d
    y = np.where(te >= 0, amp * np.sin(phase - phase[np.searchsorted(te, 0.0)]), 0.0)

    if channel.noise_kind != "none":
        rng = _rng(seed, receiver_name, sweep_id, "noise")
        noise = _noise(channel.noise_kind, n, true_rate, rng)
        lo, hi = tone.f0 - tone.bandwidth / 2, tone.f0 + tone.bandwidth / 2
        want = channel.tone_amplitude ** 2 / 2 / 10 ** (channel.target_snr_db / 10)
        noise *= math.sqrt(want / band_power(noise, true_rate, lo, hi))
        y = y + noise

    if channel.quantization == "pcm16":
        y = np.clip(np.round(y * 32767), -32767, 32767) / 32767
    else:
        y = np.clip(y, -1.0, 1.0)
    return Recording(y, NOMINAL_RATE, true_rate, receiver_name)


@dataclass(frozen=True)
class SweepPlan:
    """Where the sender sweeps.  One sweep at the camera, or A plus a side sweep B.

    For two sweeps, ``L`` is the depth of the group centre from A and ``W``
    the lateral distance of B to the right of the group centre.  B sweeps
    toward the camera, so receivers nearer the camera see positive shifts.
    """

    sweeps: int = 1
    L: float | None = None
    W: float | None = None
    v_peak: float = 3.4
    duration: float = 1.0
    lead_in: float = 0.2
    motion_time: float = DEFAULT_MOTION_TIME
    accel_noise_rms: float = DEFAULT_ACCEL_NOISE

    def __post_init__(self):
        if self.sweeps not in (1, 2):
            raise ConfigError("a sweep plan has one or two sweeps")
        if self.sweeps == 2 and not (self.L and self.W and self.L > 0 and self.W > 0):
            raise ConfigError("a two-sweep plan needs positive L and W")
        if not self.v_peak > 0:
            raise ConfigError("v_peak must be positive")

    @property
    def sweep_ids(self) -> tuple[str, ...]:
        return ("A",) if self.sweeps == 1 else ("A", "B")

    def placement(self, sweep_id):
        if sweep_id == "A":
            return (0.0, 0.0), (-1.0, 0.0)
        return (self.W, self.L), (0.0, -1.0)


@dataclass
class Session:
    scene: Scene
    plan: SweepPlan
    recordings: dict[str, dict[str, Recording]]
    traces: dict[str, SweepTrace]
    ground_truth: object  # TagLayout
    truth_angles: dict[str, float] = field(default_factory=dict)


def ground_truth_layout(scene: Scene):
    """Layout implied by geometry alone: FOV membership, rows by depth, x order."""
    from .tagging import TagLayout

    half = scene.fov / 2
    angles = {p.name: scene.camera_angle(p.name) for p in scene.people}
    inside = [p.name for p in scene.receivers if abs(angles[p.name]) < half]
    excluded = {p.name: "out_of_fov" for p in scene.devices if abs(angles[p.name]) >= half}
    bystander_inside = [p.name for p in scene.bystanders if p.member and abs(angles[p.name]) < half]
    inside += bystander_inside
    if scene.rows_ground_truth is None or len(scene.rows_ground_truth) < 2:
        rows = [sorted(inside, key=lambda n: (-angles[n], n))]
    else:
        inset = set(inside)
        groups = [[n for n in r if n in inset] for r in scene.rows_ground_truth]
        # names not listed in any row still belong somewhere; nearest row by depth
        listed = {n for r in scene.rows_ground_truth for n in r}
        means = [np.mean([scene.position_of(n).y for n in r]) for r in scene.rows_ground_truth]
        for n in inside:
            if n not in listed:
                y = scene.position_of(n).y
                groups[int(np.argmin([abs(y - m) for m in means]))].append(n)
        order = np.argsort(means, kind="stable")
        rows = [sorted(groups[i], key=lambda n: (scene.position_of(n).x, n)) for i in order if groups[i]]
    coords = {n: (scene.position_of(n).x, scene.position_of(n).y) for n in inside}
    return TagLayout(rows=[list(r) for r in rows if r], excluded=excluded,
                     angles={n: angles[n] for n in inside}, coordinates=coords)


def simulate_session(scene: Scene, plan: SweepPlan = SweepPlan(), channel: ChannelParams = ChannelParams(),
                     seed=0, tone: Tone = Tone()) -> Session:
    """Render every device for every sweep in the plan, plus the geometric truth."""
    if scene.rows_ground_truth is not None and len(scene.rows_ground_truth) >= 2 and plan.sweeps < 2:
        raise ConfigError("a scene with several rows needs a two-sweep plan")
    for p in scene.devices:
        if scene.position_of(p.name).y <= 0:
            raise ConfigError(f"receiver {p.name!r} is behind the camera")
    traces, recordings = {}, {}
    for k, sid in enumerate(plan.sweep_ids):
        origin, direction = plan.placement(sid)
        trace = synthesize_sweep(plan.v_peak, plan.duration, plan.lead_in, plan.accel_noise_rms,
                                 seed=(seed, k), motion_time=plan.motion_time,
                                 origin=origin, direction=direction)
        traces[sid] = trace
        recordings[sid] = {
            p.name: render_recording(scene, p.name, trace, tone, channel, seed, sid) for p in scene.devices
        }
    truth = ground_truth_layout(scene)
    return Session(scene, plan, recordings, traces, truth, dict(truth.angles))


def write_wav(path, rec: Recording) -> None:
    from scipy.io import wavfile

    pcm = np.clip(np.round(np.asarray(rec.samples) * 32767), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), int(rec.nominal_rate), pcm)


def read_wav(path, name: str | None = None) -> Recording:
    from scipy.io import wavfile

    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ConfigError("expected a mono recording")
    if data.dtype == np.int16:
        x = data.astype(float) / 32767
    elif data.dtype.kind == "f":
        x = data.astype(float)
    else:
        raise ConfigError(f"unsupported sample format {data.dtype}")
    if name is None:
        import os

        name = os.path.splitext(os.path.basename(str(path)))[0]
    return Recording(x, float(rate), float(rate), name)


def line_scene(n: int = 6, distance: float = 3.0, spread_deg: float = 50.0, fov_deg: float = 70.0,
               prefix: str = "p") -> Scene:
    """``n`` receivers on an arc of radius ``distance`` spanning +-spread/2 degrees."""
    if n == 1:
        angles = [0.0]
    else:
        angles = np.linspace(spread_deg / 2, -spread_deg / 2, n)
    people = tuple(
        Person(f"{prefix}{i + 1}", PlanarPoint(-distance * math.sin(math.radians(a)), distance * math.cos(math.radians(a))))
        for i, a in enumerate(angles)
    )
    return Scene(people, fov=math.radians(fov_deg))


def rows_scene(rows: int, per_row: int, depth: float = 3.0, spacing: float = 1.0, width: float = 1.0,
               fov_deg: float = 70.0) -> Scene:
    """A grid of ``rows`` x ``per_row`` receivers centred at ``depth``."""
    people, labels = [], []
    ys = depth + spacing * (np.arange(rows) - (rows - 1) / 2)
    xs = np.zeros(1) if per_row == 1 else np.linspace(-width / 2, width / 2, per_row)
    for r, y in enumerate(ys):
        row = []
        for j, x in enumerate(xs):
            name = f"r{r + 1}{chr(ord('a') + j)}"
            people.append(Person(name, PlanarPoint(float(x), float(y))))
            row.append(name)
        labels.append(tuple(row))
    return Scene(tuple(people), fov=math.radians(fov_deg), rows_ground_truth=tuple(labels))
