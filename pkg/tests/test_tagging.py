import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopplertag import geometry as geo
from dopplertag import harness, sim
from dopplertag.errors import SessionError
from dopplertag.tagging import (ReplyBus, ReplyMessage, SessionConfig, TagLayout, build_layout, collect_replies,
                                localize_multi_row, order_single_row, screen_fov)

F0, C, V = 20000.0, 340.0, 3.4
NAMES = ("ana", "ben", "cat", "dan", "eli", "fay")


def shift_from(origin, direction, point, v=V):
    dx, dy = point[0] - origin[0], point[1] - origin[1]
    cos_t = (direction[0] * dx + direction[1] * dy) / math.hypot(dx, dy)
    return F0 * (C / (C - v * cos_t) - 1)


def config(members=NAMES, fov=math.radians(70), L=None, W=None):
    return SessionConfig(frozenset(members), {"A": V, "B": V}, fov, L, W)


def bus_with(messages):
    bus = ReplyBus()
    for m in messages:
        bus.post(m)
    return bus


# --- reply collection -----------------------------------------------------

def test_all_members_reply():
    got = collect_replies(bus_with([ReplyMessage(n, 1.0) for n in NAMES]), NAMES, timeout=0.2)
    assert [r.name for r in got.replies] == sorted(NAMES)
    assert got.missing == set()


def test_silent_member_is_missing():
    bus = ReplyBus(delay=0.01)
    bus.activate(NAMES, lambda n: None if n == "dan" else ReplyMessage(n, 5.0))
    got = collect_replies(bus, NAMES, timeout=0.3)
    bus.close()
    assert len(got.replies) == 5
    assert got.missing == {"dan"}


def test_duplicate_reply_first_wins(caplog):
    msgs = [ReplyMessage("ana", 10.0), ReplyMessage("ana", -10.0), ReplyMessage("ben", 1.0)]
    got = collect_replies(bus_with(msgs), ["ana", "ben"], timeout=0.2)
    assert {r.name: r.delta_f for r in got.replies} == {"ana": 10.0, "ben": 1.0}
    assert "duplicate" in caplog.text


def test_replies_for_other_sweep_are_ignored():
    got = collect_replies(bus_with([ReplyMessage("ana", 1.0, "B")]), ["ana"], timeout=0.1, sweep_id="A")
    assert got.replies == [] and got.missing == {"ana"}


def test_concurrent_arrival():
    bus = ReplyBus(delay=lambda n: 0.001 * NAMES.index(n))
    bus.activate(NAMES, lambda n: ReplyMessage(n, float(NAMES.index(n))))
    got = collect_replies(bus, NAMES, timeout=2.0)
    bus.close()
    assert {r.name for r in got.replies} == set(NAMES)


def test_transport_failure_is_a_session_error():
    with pytest.raises(SessionError):
        collect_replies(ReplyBus(fail=True), NAMES, timeout=0.1)
    with pytest.raises(SessionError):
        ReplyBus(fail=True).activate(NAMES, lambda n: None)


def test_reply_validation():
    with pytest.raises(ValueError):
        ReplyMessage("", 1.0)
    with pytest.raises(ValueError):
        ReplyMessage("ana", 1.0, "C")


# --- FOV screening ---------------------------------------------------------

def test_on_axis_reply_is_included():
    s = screen_fov([ReplyMessage("ana", 0.0)], config(["ana"]))
    assert [(r.name, a) for r, a in s.included] == [("ana", pytest.approx(0.0, abs=1e-12))]


def test_impossible_shift_is_inconsistent():
    s = screen_fov([ReplyMessage("ana", 400.0)], config(["ana"]))
    assert s.excluded == {"ana": ("inconsistent", None)}


def test_undetected_tone_is_excluded():
    s = screen_fov([ReplyMessage("ana", None)], config(["ana"]))
    assert s.excluded["ana"][0] == "tone_not_detected"


def test_bystander_at_40_degrees_is_out_of_view():
    scene = harness.load_scene("scenes/fov_screening.json")
    res = harness.run_session(scene, sim.ChannelParams.quiet(), seed=0)
    assert res.layout.excluded.get("gus") == "out_of_fov"
    assert res.layout.excluded.get("hal") == "out_of_fov"
    assert "ivy" not in res.layout.placed


def test_boundary_is_strict():
    half = math.radians(35)
    theta = math.pi / 2 - half
    d = geo.shift_for_geometry(theta, V, F0, C)
    s = screen_fov([ReplyMessage("ana", d)], config(["ana"]))
    alpha = geo.angle_from_shift(F0 + d, F0, C, V).alpha
    assert (alpha < half) == bool(s.included)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-199.0, 199.0), min_size=1, max_size=8),
       st.floats(10.0, 170.0), st.floats(0.0, 60.0))
def test_fov_monotonicity(shifts, fov_deg, extra):
    replies = [ReplyMessage(f"p{i}", d) for i, d in enumerate(shifts)]
    names = [r.name for r in replies]
    small = screen_fov(replies, config(names, math.radians(fov_deg)))
    large = screen_fov(replies, config(names, math.radians(min(fov_deg + extra, 179.0))))
    assert {r.name for r, _ in small.included} <= {r.name for r, _ in large.included}


# --- single row ------------------------------------------------------------

def test_order_by_descending_shift():
    replies = [ReplyMessage("B", 20.0), ReplyMessage("C", -90.0), ReplyMessage("A", 150.0)]
    assert order_single_row(replies) == ["A", "B", "C"]


def test_single_reply():
    assert order_single_row([ReplyMessage("A", 3.0)]) == ["A"]


def test_ties_break_by_name_with_warning():
    warnings = []
    assert order_single_row([ReplyMessage("zed", 5.0), ReplyMessage("amy", 5.0)], warnings) == ["amy", "zed"]
    assert warnings


@given(st.lists(st.floats(-200.0, 200.0), min_size=1, max_size=10, unique=True), st.floats(1e-3, 1e3))
def test_order_scale_invariance(shifts, k):
    replies = [ReplyMessage(f"p{i}", d) for i, d in enumerate(shifts)]
    scaled = [ReplyMessage(r.name, r.delta_f * k) for r in replies]
    assert order_single_row(replies) == order_single_row(scaled)


def test_rendered_single_row_matches_truth():
    res = harness.run_session(harness.load_scene("scenes/single_row_3m.json"), sim.ChannelParams.quiet(), seed=0)
    assert res.layout.rows == res.truth.rows == [["ana", "ben", "cai", "dev", "eli", "fay"]]


# --- two sweeps ------------------------------------------------------------

GRID = {f"{r}{c}": (x, y) for r, y in (("f", 2.5), ("b", 3.5)) for c, x in (("l", -0.5), ("m", 0.0), ("r", 0.5))}


def grid_replies(L=3.0, W=2.0, points=GRID):
    plan = sim.SweepPlan(sweeps=2, L=L, W=W)
    out = {}
    for sid in "AB":
        origin, direction = plan.placement(sid)
        out[sid] = [ReplyMessage(n, shift_from(origin, direction, p), sid) for n, p in points.items()]
    return out


def test_grid_localization_is_exact():
    reps = grid_replies()
    loc = localize_multi_row(reps["A"], reps["B"], config(GRID, L=3.0, W=2.0))
    assert loc.excluded == {}
    for n, (x, y) in GRID.items():
        assert loc.coordinates[n] == pytest.approx((x, y), abs=1e-6)


def test_missing_side_reply_is_excluded():
    reps = grid_replies()
    b = [r for r in reps["B"] if r.name != "bm"]
    loc = localize_multi_row(reps["A"], b, config(GRID, L=3.0, W=2.0))
    assert loc.excluded == {"bm": "no_reply"}
    assert "bm" not in loc.coordinates


def test_grid_layout():
    reps = grid_replies()
    loc = localize_multi_row(reps["A"], reps["B"], config(GRID, L=3.0, W=2.0))
    lay = build_layout(loc.coordinates, k="auto", scale=0.5)
    assert lay.rows == [["fl", "fm", "fr"], ["bl", "bm", "br"]]


def test_rendered_two_row_depth_error():
    scene = harness.load_scene("scenes/two_rows.json")
    errors = []
    for seed in range(10):
        res = harness.run_session(scene, sim.ChannelParams.quiet(), seed=seed)
        assert res.matched
        for n, (x, y) in res.layout.coordinates.items():
            errors.append(abs(y - scene.position_of(n).y))
    assert max(errors) <= 0.3


def test_rendered_three_rows_auto_k():
    scene = harness.load_scene("scenes/three_rows.json")
    res = harness.run_session(scene, sim.ChannelParams.quiet(), seed=1)
    assert res.layout.rows == res.truth.rows
    assert len(res.layout.rows) == 3


# --- layout ----------------------------------------------------------------

def test_four_point_layout():
    coords = {"left3": (-1.0, 3.0), "right3": (1.0, 3.0), "left5": (-1.0, 5.0), "right5": (1.0, 5.0)}
    assert build_layout(coords, k=2).rows == [["left3", "right3"], ["left5", "right5"]]


def test_one_name_layout():
    assert build_layout(["solo"]).rows == [["solo"]]
    assert build_layout({"solo": (0.0, 3.0)}).rows == [["solo"]]


def test_layout_rejects_duplicates_and_unknown_reasons():
    with pytest.raises(ValueError):
        TagLayout([["a", "a"]])
    with pytest.raises(ValueError):
        TagLayout([["a"]], {"a": "no_reply"})
    with pytest.raises(ValueError):
        TagLayout([["a"]], {"b": "bored"})


def test_layout_json_and_caption():
    lay = TagLayout([["a", "b"], ["c"]], {"d": "out_of_fov"}, {"a": math.radians(10)})
    doc = lay.to_dict()
    assert doc["rows"] == [["a", "b"], ["c"]]
    assert doc["excluded"] == {"d": "out_of_fov"}
    assert doc["angles"]["a"] == pytest.approx(10.0)
    assert lay.caption() == "Front (left to right): a, b. Row 2 (left to right): c."


@pytest.mark.parametrize("path", ["scenes/single_row_3m.json", "scenes/fov_screening.json",
                                  "scenes/two_rows.json"])
@pytest.mark.parametrize("channel", [sim.ChannelParams.quiet(), sim.ChannelParams(target_snr_db=0.0)])
def test_completeness(path, channel):
    scene = harness.load_scene(path)
    res = harness.run_session(scene, channel, seed=3)
    members = {p.name for p in scene.devices}
    placed, excluded = set(res.layout.placed), set(res.layout.excluded)
    assert not placed & excluded
    assert placed | excluded == members
    assert all(r in ("out_of_fov", "no_reply", "tone_not_detected", "inconsistent")
               for r in res.layout.excluded.values())


def test_lossy_transport_marks_no_reply():
    scene = harness.load_scene("scenes/single_row_3m.json")
    res = harness.run_session(scene, sim.ChannelParams.quiet(), seed=0,
                              bus_factory=lambda: ReplyBus(loss=1.0), reply_timeout=0.2)
    assert res.layout.rows == []
    assert set(res.layout.excluded.values()) == {"no_reply"}


def test_noiseless_sessions_are_sound():
    rng = np.random.default_rng(0)
    for seed in range(5):
        # random single row, neighbours at least 8 deg apart, inside a 70 deg view
        angles = np.sort(rng.choice(np.arange(-30, 31, 8), size=4, replace=False))[::-1]
        people = tuple(sim.Person(f"q{i}", geo.PlanarPoint(-3 * math.sin(math.radians(a)),
                                                           3 * math.cos(math.radians(a))))
                       for i, a in enumerate(angles))
        res = harness.run_session(sim.Scene(people), sim.ChannelParams.quiet(), seed=seed)
        assert res.matched, (angles, res.layout.rows)
