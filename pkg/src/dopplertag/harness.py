"""End-to-end sessions, metrics, table reproduction and experiment sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import geometry as geo
from .dsp import Pipeline, process_recording
from .errors import ConfigError, SceneError, ToneNotDetected
from .sim import ChannelParams, Scene, SweepPlan, line_scene, rows_scene, simulate_session
from .tagging import (ReplyBus, ReplyMessage, SessionConfig, TagLayout, build_layout, collect_replies,
                      localize_multi_row, order_single_row, screen_fov)

DEFAULT_SIDE_DISTANCE = 2.0
DEFAULT_ROW_SCALE = 0.5


def load_scene(path) -> Scene:
    """Read a scene JSON document; schema errors name the offending field."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    except UnicodeDecodeError as exc:
        raise SceneError("$", "file is not UTF-8") from exc
    return Scene.from_dict(doc)


def default_plan(scene: Scene, side_distance: float = DEFAULT_SIDE_DISTANCE, **kw) -> SweepPlan:
    """One sweep for a single row; for several rows add a side sweep.

    L is the mean depth of the group, as the photographer would pace it out.
    """
    rows = scene.rows_ground_truth
    if rows is None or len(rows) < 2:
        return SweepPlan(**kw)
    depth = float(np.mean([scene.position_of(p.name).y for p in scene.receivers]))
    return SweepPlan(sweeps=2, L=depth, W=side_distance, **kw)


@dataclass
class SessionResult:
    layout: TagLayout
    truth: TagLayout
    matched: bool
    universe: frozenset
    estimates: dict = field(default_factory=dict)  # (sweep, name) -> ShiftEstimate | None
    v_s: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"matched": self.matched, "layout": self.layout.to_dict(), "truth": self.truth.to_dict(),
                "v_s": {k: round(v, 6) for k, v in self.v_s.items()}}


def run_session(scene: Scene, channel: ChannelParams = ChannelParams(), seed=0, plan: SweepPlan | None = None,
                k_rows: int | str = "auto", pipeline: Pipeline = Pipeline(), row_scale: float = DEFAULT_ROW_SCALE,
                bus_factory=ReplyBus, reply_timeout: float = 30.0) -> SessionResult:
    """Simulate, let every receiver estimate its shift and reply, then tag."""
    plan = plan or default_plan(scene)
    session = simulate_session(scene, plan, channel, seed)
    members = frozenset(p.name for p in scene.devices)
    v_s = {sid: geo.integrate_velocity(tr.accel_readings, 0.0, 1.0 / 100).peak for sid, tr in session.traces.items()}
    config = SessionConfig(members, v_s, scene.fov, plan.L, plan.W, reply_timeout, row_scale=row_scale)

    estimates = {}
    replies = {}
    missing_any = set()
    for sid in plan.sweep_ids:
        recs = session.recordings[sid]

        def respond(name, sid=sid, recs=recs):
            try:
                est = process_recording(recs[name], pipeline)
            except ToneNotDetected:
                estimates[(sid, name)] = None
                return ReplyMessage(name, None, sid)
            estimates[(sid, name)] = est
            return ReplyMessage(name, est.delta_f, sid, est.degraded)

        bus = bus_factory()
        bus.activate(members, respond)
        got = collect_replies(bus, members, config.reply_timeout, sid)
        bus.close()
        replies[sid] = got.replies
        missing_any |= got.missing if sid == "A" else set()

    excluded = {n: "no_reply" for n in missing_any}
    screened = screen_fov(replies["A"], config, "A")
    excluded.update({n: reason for n, (reason, _) in screened.excluded.items()})
    angles = {r.name: a for r, a in screened.included}
    warnings: list[str] = []
    if plan.sweeps == 1:
        order = order_single_row([r for r, _ in screened.included], warnings)
        layout = build_layout(order, excluded=excluded, angles=angles, warnings=warnings)
    else:
        loc = localize_multi_row([r for r, _ in screened.included], replies["B"], config)
        excluded.update(loc.excluded)
        layout = build_layout(loc.coordinates, k=k_rows, scale=row_scale, excluded=excluded,
                              angles={n: a for n, a in angles.items() if n in loc.coordinates})
    universe = frozenset(p.name for p in scene.people)
    return SessionResult(layout, session.ground_truth, layout.matches(session.ground_truth), universe,
                         estimates, v_s)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    fallout: float
    sessions: int
    matched: int
    true_positive: int
    tagged: int
    inside: int
    outside: int
    outside_tagged: int
    position_credit: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compute_metrics(layouts: Sequence[TagLayout], truths: Sequence[TagLayout],
                    universes: Sequence[Iterable[str]] | None = None) -> MetricsReport:
    """Exact-layout accuracy plus per-person inclusion rates pooled over sessions.

    A session's universe is everyone present; people not placed by the truth
    count as outside the picture.  Empty denominators give the ideal value.
    """
    if len(layouts) != len(truths) or (universes is not None and len(universes) != len(truths)):
        raise ValueError("layouts, truths and universes must have equal length")
    matched = tp = tagged = inside = outside = out_tagged = 0
    credit = 0.0
    for i, (lay, tru) in enumerate(zip(layouts, truths)):
        t_in = set(tru.placed)
        got = set(lay.placed)
        uni = set(universes[i]) if universes is not None else t_in | set(tru.excluded) | got
        uni |= t_in | got
        outs = uni - t_in
        matched += lay.matches(tru)
        tp += len(t_in & got)
        tagged += len(got)
        inside += len(t_in)
        outside += len(outs)
        out_tagged += len(outs & got)
        credit += lay.position_credit(tru)
    n = len(layouts)
    return MetricsReport(
        accuracy=matched / n if n else 1.0,
        precision=tp / tagged if tagged else 1.0,
        recall=tp / inside if inside else 1.0,
        fallout=out_tagged / outside if outside else 0.0,
        sessions=n, matched=matched, true_positive=tp, tagged=tagged, inside=inside,
        outside=outside, outside_tagged=out_tagged, position_credit=credit / n if n else 1.0,
    )


# Published values: angular error (deg) from the 9.5 cm camera-speaker gap,
# rows are distances in metres, columns alpha = 0..60 deg in 10 deg steps.
GAP_ERROR_TABLE = {
    3: (1.8, 1.7, 1.5, 1.3, 1.0, 0.7, 0.4),
    5: (1.0, 1.0, 0.9, 0.8, 0.6, 0.4, 0.2),
    10: (0.5, 0.5, 0.4, 0.4, 0.3, 0.2, 0.1),
}
# smallest distinguishable beta (deg) for alpha (deg): 44.1 kHz and 6.3 kHz, 2048 points
RESOLUTION_TABLES = {
    "II": (44100, ((55, 62.1), (65, 71.6), (75, 81.3), (85, 91.2), (95, 101.2), (105, 111.5), (115, 122.1), (125, 133.0))),
    "III": (6300, ((55, 56.1), (65, 65.9), (75, 75.9), (85, 85.8), (95, 95.8), (105, 105.9), (115, 115.9), (125, 126.0))),
}
TABLE_TOLERANCE = 0.1


@dataclass(frozen=True)
class TableResult:
    which: str
    rows: list  # (label, computed, published)
    max_deviation: float

    @property
    def ok(self) -> bool:
        return self.max_deviation <= TABLE_TOLERANCE

    def render(self) -> str:
        out = [f"Table {self.which}", f"{'cell':>14} {'computed':>9} {'published':>9} {'dev':>6}"]
        for label, comp, pub in self.rows:
            out.append(f"{label:>14} {comp:9.3f} {pub:9.1f} {abs(comp - pub):6.3f}")
        out.append(f"max deviation {self.max_deviation:.3f} deg ({'ok' if self.ok else 'FAIL'})")
        return "\n".join(out)


def reproduce_tables(which: str) -> TableResult:
    which = which.upper()
    rows = []
    if which == "I":
        for dist, published in GAP_ERROR_TABLE.items():
            for i, pub in enumerate(published):
                a = math.radians(10 * i)
                err = math.degrees(abs(geo.camera_corrected_angle(a, geo.CAMERA_GAP, dist, "away_from_speaker") - a))
                rows.append((f"{dist}m/{10 * i}deg", err, pub))
    elif which in RESOLUTION_TABLES:
        rate, cells = RESOLUTION_TABLES[which]
        res = geo.ResolutionParams(rate, 2048)
        for a, pub in cells:
            rows.append((f"{a}deg", math.degrees(geo.min_distinguishable_beta(math.radians(a), res)), pub))
    else:
        raise ConfigError(f"unknown table {which!r}; expected I, II or III")
    return TableResult(which, rows, max(abs(c - p) for _, c, p in rows))


NOISE_GRID = (("none", math.inf), ("ambient", 20.0), ("ambient", 10.0), ("ambient", 5.0), ("ambient", 0.0))


@dataclass(frozen=True)
class Cell:
    distance: float = 3.0
    receivers: int = 6
    rows: int = 1
    noise: str = "ambient"
    snr_db: float = 10.0

    def scene(self) -> Scene:
        if self.rows <= 1:
            return line_scene(self.receivers, self.distance)
        per_row = max(1, self.receivers // self.rows)
        return rows_scene(self.rows, per_row, depth=self.distance)

    def channel(self) -> ChannelParams:
        if self.noise == "none" or math.isinf(self.snr_db):
            return ChannelParams.quiet()
        return ChannelParams(noise_kind=self.noise, target_snr_db=self.snr_db)


@dataclass(frozen=True)
class ExperimentSpec:
    cells: tuple[Cell, ...]
    repetitions: int = 20
    seed_base: int = 0

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.cells:
            raise ConfigError("no experiment cells")

    @classmethod
    def grid(cls, distances=(3.0,), receivers=(6,), rows=(1,), noise=(("ambient", 10.0),), repetitions=20,
             seed_base=0) -> "ExperimentSpec":
        cells = tuple(Cell(d, n, r, kind, snr) for d in distances for n in receivers for r in rows
                      for kind, snr in noise)
        return cls(cells, repetitions, seed_base)


CSV_FIELDS = ("kind", "cell", "distance", "receivers", "rows", "noise", "snr_db", "rep", "seed",
              "matched", "accuracy", "precision", "recall", "fallout", "position_credit")


def _run_cell(args):
    index, cell, reps, seed_base = args
    out = []
    scene = cell.scene()
    for rep in range(reps):
        seed = (seed_base, index, rep)
        res = run_session(scene, cell.channel(), seed)
        m = compute_metrics([res.layout], [res.truth], [res.universe])
        out.append((rep, res, m))
    return index, out


def run_experiment(spec: ExperimentSpec, out_path=None, workers: int = 1) -> str:
    """One CSV row per (cell, repetition) and one aggregate row per cell.

    Seeds derive from (seed_base, cell index, repetition), so the file is
    identical whatever the number of workers.
    """
    jobs = [(i, c, spec.repetitions, spec.seed_base) for i, c in enumerate(spec.cells)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = dict(ex.map(_run_cell, jobs))
    else:
        results = dict(map(_run_cell, jobs))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for i, cell in enumerate(spec.cells):
        base = [i, cell.distance, cell.receivers, cell.rows, cell.noise, cell.snr_db]
        runs = results[i]
        for rep, res, m in runs:
            w.writerow(["raw", *base, rep, f"{spec.seed_base}:{i}:{rep}", int(res.matched), f"{m.accuracy:.6f}",
                        f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.fallout:.6f}", f"{m.position_credit:.6f}"])
        agg = compute_metrics([r.layout for _, r, _ in runs], [r.truth for _, r, _ in runs],
                              [r.universe for _, r, _ in runs])
        w.writerow(["aggregate", *base, "", "", agg.matched, f"{agg.accuracy:.6f}", f"{agg.precision:.6f}",
                    f"{agg.recall:.6f}", f"{agg.fallout:.6f}", f"{agg.position_credit:.6f}"])
    text = buf.getvalue()
    if out_path is not None:
        try:
            with open(out_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {out_path}: {exc.strerror}") from exc
    return text
