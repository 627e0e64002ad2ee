"""Command-line entry point: simulate, analyze, session, tables, experiment."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import harness
from .dsp import process_recording
from .errors import ConfigError, DomainError, SceneError, SimulationError, ToneNotDetected
from .geometry import integrate_velocity
from .sim import ChannelParams, NOISE_KINDS, read_wav, simulate_session, write_wav

EXIT_OK = 0
EXIT_TABLES = 1
EXIT_PARSE = 3
EXIT_SIMULATION = 4
EXIT_DETECTION = 5


def _channel(args) -> ChannelParams:
    if args.noise == "none":
        return ChannelParams.quiet()
    return ChannelParams(noise_kind=args.noise, target_snr_db=args.snr_db)


def _k_rows(value):
    if value == "auto":
        return value
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("--k-rows must be >= 1 or 'auto'")
    return k


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    return tuple(int(v) for v in _floats(text))


def _emit(text, out=None):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_simulate(args) -> int:
    scene = harness.load_scene(args.scene)
    plan = harness.default_plan(scene, args.side_distance)
    session = simulate_session(scene, plan, _channel(args), args.seed)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for sid, recs in session.recordings.items():
        for name, rec in recs.items():
            path = os.path.join(args.out, f"{name}_{sid}.wav")
            write_wav(path, rec)
            files.append(path)
    truth = session.ground_truth.to_dict()
    truth["v_s_measured"] = {sid: integrate_velocity(tr.accel_readings).peak
                             for sid, tr in session.traces.items()}
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
    if args.format == "json":
        print(json.dumps({"files": files, "truth": truth}, indent=2))
    else:
        print(f"wrote {len(files)} recordings to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    status = EXIT_OK
    rows = []
    for path in args.wav:
        try:
            est = process_recording(read_wav(path))
        except ToneNotDetected as exc:
            print(f"{path}: tone not detected ({exc})", file=sys.stderr)
            status = EXIT_DETECTION
            continue
        rows.append(est)
    if not rows:
        return status
    if args.format == "json":
        _emit("\n".join(e.to_json() for e in rows), args.out)
    elif args.format == "csv":
        lines = ["name,f0_local,delta_f,coarse_delta_f,detected,peak_frame_index,degraded"]
        lines += [f"{e.name},{e.f0_local:.4f},{e.delta_f:.4f},{e.coarse_delta_f:.4f},{int(e.detected)},"
                  f"{e.peak_frame_index},{int(e.degraded)}" for e in rows]
        _emit("\n".join(lines), args.out)
    else:
        _emit("\n".join(f"{e.name}: delta_f {e.delta_f:+.2f} Hz (coarse {e.coarse_delta_f:+.2f}, "
                        f"reference {e.f0_local:.2f} Hz){' degraded' if e.degraded else ''}" for e in rows), args.out)
    return status


def cmd_session(args) -> int:
    scene = harness.load_scene(args.scene)
    plan = harness.default_plan(scene, args.side_distance)
    res = harness.run_session(scene, _channel(args), args.seed, plan, k_rows=args.k_rows)
    if args.format == "text":
        verdict = "matched" if res.matched else "NOT matched"
        text = f"{res.layout.caption()}\nexcluded: {res.layout.excluded or 'none'}\n{verdict} ground truth"
    elif args.format == "csv":
        lines = ["name,row,position,excluded"]
        for i, row in enumerate(res.layout.rows):
            lines += [f"{n},{i + 1},{j + 1}," for j, n in enumerate(row)]
        lines += [f"{n},,,{r}" for n, r in sorted(res.layout.excluded.items())]
        text = "\n".join(lines)
    else:
        text = json.dumps(res.to_dict(), indent=2)
    _emit(text, args.out)
    return EXIT_OK


def cmd_tables(args) -> int:
    which = ["I", "II", "III"] if args.which.lower() == "all" else [args.which]
    results = [harness.reproduce_tables(w) for w in which]
    if args.format == "json":
        text = json.dumps([{"table": r.which, "max_deviation": r.max_deviation, "ok": r.ok,
                            "cells": [{"cell": c, "computed": v, "published": p} for c, v, p in r.rows]}
                           for r in results], indent=2)
    elif args.format == "csv":
        lines = ["table,cell,computed,published,deviation"]
        lines += [f"{r.which},{c},{v:.4f},{p},{abs(v - p):.4f}" for r in results for c, v, p in r.rows]
        text = "\n".join(lines)
    else:
        text = "\n\n".join(r.render() for r in results)
    _emit(text, args.out)
    return EXIT_OK if all(r.ok for r in results) else EXIT_TABLES


def cmd_experiment(args) -> int:
    noise = tuple(("none", math.inf) if args.noise == "none" else (args.noise, s) for s in args.snr_db)
    spec = harness.ExperimentSpec.grid(args.distances, args.receivers, args.rows, noise, args.reps, args.seed)
    text = harness.run_experiment(spec, args.out, workers=args.workers)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dopplertag", description="Doppler-shift photo tagging toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = p.add_subparsers(dest="command", required=True)

    def channel_flags(sp, snr_many=False):
        sp.add_argument("--noise", choices=NOISE_KINDS, default="ambient")
        if snr_many:
            sp.add_argument("--snr-db", type=_floats, default=(10.0,), help="comma-separated in-band SNRs at 3 m")
        else:
            sp.add_argument("--snr-db", type=float, default=10.0, help="in-band SNR at 3 m")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="render recordings for a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, help="output directory for WAV files")
    s.add_argument("--side-distance", type=float, default=harness.DEFAULT_SIDE_DISTANCE)
    s.add_argument("--format", choices=("json", "text"), default="text")
    channel_flags(s)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="estimate the Doppler shift in WAV recordings")
    a.add_argument("wav", nargs="+")
    a.add_argument("--format", choices=("json", "csv", "text"), default="json")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    ss = sub.add_parser("session", help="run a full simulated tagging session")
    ss.add_argument("--scene", required=True)
    ss.add_argument("--k-rows", type=_k_rows, default="auto")
    ss.add_argument("--side-distance", type=float, default=harness.DEFAULT_SIDE_DISTANCE)
    ss.add_argument("--format", choices=("json", "csv", "text"), default="json")
    ss.add_argument("--out")
    channel_flags(ss)
    ss.set_defaults(func=cmd_session)

    t = sub.add_parser("tables", help="recompute the gap-error and resolution tables")
    t.add_argument("which", nargs="?", default="all", choices=("I", "II", "III", "all"))
    t.add_argument("--format", choices=("json", "csv", "text"), default="text")
    t.add_argument("--out")
    t.set_defaults(func=cmd_tables)

    e = sub.add_parser("experiment", help="accuracy sweep over a parameter grid, as CSV")
    e.add_argument("--distances", type=_floats, default=(3.0,))
    e.add_argument("--receivers", type=_ints, default=(6,))
    e.add_argument("--rows", type=_ints, default=(1,))
    e.add_argument("--reps", type=int, default=20)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out")
    e.add_argument("--format", choices=("csv",), default="csv")
    channel_flags(e, snr_many=True)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SceneError as exc:
        print(f"error: scene {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ToneNotDetected as exc:
        print(f"error: tone not detected: {exc}", file=sys.stderr)
        return EXIT_DETECTION
    except (SimulationError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
