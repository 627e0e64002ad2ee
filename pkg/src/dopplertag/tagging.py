"""Sender side: collect replies, screen by field of view, order and place names."""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from . import geometry as geo
from .cluster import cluster_rows
from .errors import DegenerateGeometry, InconsistentMeasurement, SessionError

log = logging.getLogger(__name__)

EXCLUSION_REASONS = ("out_of_fov", "no_reply", "tone_not_detected", "inconsistent")


@dataclass(frozen=True)
class ReplyMessage:
    name: str
    delta_f: float | None  # None when the receiver heard no tone
    sweep_id: str = "A"
    degraded: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("reply without a name")
        if self.sweep_id not in ("A", "B"):
            raise ValueError("sweep_id must be 'A' or 'B'")


@dataclass(frozen=True)
class SessionConfig:
    group_members: frozenset
    v_s: Mapping[str, float]  # measured peak speed per sweep id
    fov: float = geo.DEFAULT_FOV
    L: float | None = None
    W: float | None = None
    reply_timeout: float = 30.0
    f0: float = geo.TONE_FREQUENCY
    c: float = geo.SOUND_SPEED
    row_scale: float = 1.0

    def __post_init__(self):
        if not self.group_members:
            raise ValueError("empty group")
        if any(not v > 0 for v in self.v_s.values()):
            raise ValueError("sweep speeds must be positive")


@dataclass
class TagLayout:
    rows: list[list[str]]
    excluded: dict[str, str] = field(default_factory=dict)
    angles: dict[str, float] = field(default_factory=dict)  # radians, positive toward picture-left
    coordinates: dict[str, tuple[float, float] | None] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        placed = [n for row in self.rows for n in row]
        if len(placed) != len(set(placed)) or set(placed) & set(self.excluded):
            raise ValueError("a name appears twice in the layout")
        bad = set(self.excluded.values()) - set(EXCLUSION_REASONS)
        if bad:
            raise ValueError(f"unknown exclusion reason {sorted(bad)[0]!r}")

    @property
    def placed(self) -> list[str]:
        return [n for row in self.rows for n in row]

    def matches(self, other: "TagLayout") -> bool:
        """Exact agreement of rows, order within rows and inclusion."""
        return [list(r) for r in self.rows] == [list(r) for r in other.rows]

    def position_credit(self, other: "TagLayout") -> float:
        """Fraction of the other layout's slots holding the same name here."""
        slots = [(i, j, n) for i, row in enumerate(other.rows) for j, n in enumerate(row)]
        if not slots:
            return 1.0
        hit = sum(1 for i, j, n in slots if i < len(self.rows) and j < len(self.rows[i]) and self.rows[i][j] == n)
        return hit / len(slots)

    def to_dict(self) -> dict:
        return {
            "rows": [list(r) for r in self.rows],
            "excluded": dict(sorted(self.excluded.items())),
            "angles": {n: round(math.degrees(a), 6) for n, a in sorted(self.angles.items())},
            "coordinates": {
                n: (None if c is None else [round(c[0], 6), round(c[1], 6)])
                for n, c in sorted(self.coordinates.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def caption(self) -> str:
        """One caption line, front row first, e.g. ``Front: Ann, Bob. Row 2: Cy.``"""
        if not self.rows:
            return "Nobody tagged."
        parts = []
        for i, row in enumerate(self.rows):
            label = "Front" if i == 0 and len(self.rows) > 1 else ("In picture" if len(self.rows) == 1 else f"Row {i + 1}")
            parts.append(f"{label} (left to right): {', '.join(row)}.")
        return " ".join(parts)


class ReplyBus:
    """In-process stand-in for the network between sender and receivers.

    ``activate`` hands each member's responder to a timer thread that posts
    its reply after an injectable delay; ``loss`` drops replies with the
    given probability.  ``fail`` simulates a broken transport.
    """

    def __init__(self, delay: float | Callable[[str], float] = 0.0, loss: float = 0.0, seed=0, fail=False):
        self._q: queue.Queue = queue.Queue()
        self._delay = delay
        self._loss = loss
        self._rng = np.random.default_rng(seed)
        self._fail = fail
        self._timers: list[threading.Timer] = []

    def post(self, msg: ReplyMessage) -> None:
        self._q.put(msg)

    def activate(self, members: Iterable[str], responder: Callable[[str], ReplyMessage | None]) -> None:
        if self._fail:
            raise SessionError("transport unavailable")
        for name in sorted(members):
            lost = self._loss > 0 and self._rng.random() < self._loss
            delay = self._delay(name) if callable(self._delay) else self._delay

            def send(name=name, lost=lost):
                try:
                    msg = responder(name)
                except Exception as exc:  # a crashed receiver simply never answers
                    log.warning("receiver %s failed: %s", name, exc)
                    return
                if msg is not None and not lost:
                    self.post(msg)

            t = threading.Timer(delay, send)
            t.daemon = True
            self._timers.append(t)
            t.start()

    def receive(self, timeout: float):
        if self._fail:
            raise SessionError("transport unavailable")
        try:
            return self._q.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            return None

    def close(self):
        for t in self._timers:
            t.cancel()


class Collected(NamedTuple):
    replies: list[ReplyMessage]
    missing: set[str]


def collect_replies(transport, members: Iterable[str], timeout: float, sweep_id: str = "A") -> Collected:
    """Wait for one reply per member; the first reply from a name wins."""
    import time

    want = set(members)
    got: dict[str, ReplyMessage] = {}
    deadline = time.monotonic() + timeout
    while len(got) < len(want):
        left = deadline - time.monotonic()
        if left <= 0:
            break
        msg = transport.receive(left)
        if msg is None:
            break
        if msg.sweep_id != sweep_id or msg.name not in want:
            log.warning("ignoring reply from %s for sweep %s", msg.name, msg.sweep_id)
            continue
        if msg.name in got:
            log.warning("duplicate reply from %s rejected", msg.name)
            continue
        got[msg.name] = msg
    # late duplicates still queued are dropped with a warning
    while True:
        msg = transport.receive(0)
        if msg is None:
            break
        log.warning("late or duplicate reply from %s rejected", msg.name)
    return Collected([got[n] for n in sorted(got)], want - set(got))


class Screened(NamedTuple):
    included: list[tuple[ReplyMessage, float]]  # reply, signed alpha
    excluded: dict[str, tuple[str, float | None]]


def reply_angle(reply: ReplyMessage, v_s: float, config: SessionConfig) -> geo.AngleResult:
    return geo.angle_from_shift(config.f0 + reply.delta_f, config.f0, config.c, v_s)


def screen_fov(replies: Iterable[ReplyMessage], config: SessionConfig, sweep_id: str = "A") -> Screened:
    """Keep replies whose bearing lies strictly inside the half field of view."""
    included, excluded = [], {}
    v_s = config.v_s[sweep_id]
    for r in replies:
        if r.delta_f is None:
            excluded[r.name] = ("tone_not_detected", None)
            continue
        try:
            a = reply_angle(r, v_s, config)
        except InconsistentMeasurement:
            excluded[r.name] = ("inconsistent", None)
            continue
        if geo.in_fov(a.alpha, config.fov):
            included.append((r, a.signed_alpha))
        else:
            excluded[r.name] = ("out_of_fov", a.signed_alpha)
    return Screened(included, excluded)


def order_single_row(included: Iterable[ReplyMessage], warnings: list | None = None) -> list[str]:
    """Left to right under a leftward sweep: larger shift means further left."""
    replies = list(included)
    shifts = [r.delta_f for r in replies]
    if len(set(shifts)) < len(shifts):
        msg = "equal shifts: neighbours closer than one frequency bin, ordered by name"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    return [r.name for r in sorted(replies, key=lambda r: (-r.delta_f, r.name))]


class Localized(NamedTuple):
    coordinates: dict[str, tuple[float, float]]  # camera frame (lateral, depth)
    excluded: dict[str, str]


def localize_multi_row(replies_a: Iterable[ReplyMessage], replies_b: Iterable[ReplyMessage],
                       config: SessionConfig) -> Localized:
    """Intersect each name's bearing line from sweep A with the one from sweep B."""
    if not (config.L and config.W):
        raise ValueError("two-sweep localization needs L and W")
    by_b = {r.name: r for r in replies_b}
    coords, excluded = {}, {}
    for ra in replies_a:
        rb = by_b.get(ra.name)
        if rb is None:
            excluded[ra.name] = "no_reply"
            continue
        if ra.delta_f is None or rb.delta_f is None:
            excluded[ra.name] = "tone_not_detected"
            continue
        try:
            alpha = reply_angle(ra, config.v_s["A"], config).signed_alpha
            beta = reply_angle(rb, config.v_s["B"], config).signed_alpha
            p = geo.intersect_two_sweeps(alpha, beta, config.L, config.W)
        except (InconsistentMeasurement, DegenerateGeometry):
            excluded[ra.name] = "inconsistent"
            continue
        cam = geo.sweep_frame_to_camera(p, config.L)
        coords[ra.name] = (cam.x, cam.y)
    return Localized(coords, excluded)


def build_layout(placements, k: int | str = "auto", scale: float = 1.0, excluded=None, angles=None,
                 warnings=None) -> TagLayout:
    """Rows from either an ordered name list (one row) or camera-frame coordinates.

    With coordinates, depths are clustered into rows (nearest first) and each
    row is ordered by lateral position, picture-left first.
    """
    excluded = dict(excluded or {})
    angles = dict(angles or {})
    if isinstance(placements, Mapping):
        names = sorted(placements)
        if not names:
            return TagLayout([], excluded, angles, {}, list(warnings or []))
        ys = [placements[n][1] for n in names]
        assign = cluster_rows(ys, k=k, scale=scale, k_max=min(5, len(names)))
        rows = [[] for _ in range(assign.k)]
        for n, lab in zip(names, assign.labels):
            rows[lab].append(n)
        rows = [sorted(r, key=lambda n: (placements[n][0], n)) for r in rows]
        coords = {n: tuple(placements[n]) for n in names}
        return TagLayout(rows, excluded, angles, coords, list(warnings or []))
    order = list(placements)
    return TagLayout([order] if order else [], excluded, angles, {n: None for n in order}, list(warnings or []))
