import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import hilbert

from dopplertag import geometry as geo
from dopplertag import sim
from dopplertag.errors import ConfigError, SceneError, SimulationError
from dopplertag.geometry import PlanarPoint

QUIET_FLOAT = sim.ChannelParams(noise_kind="none", quantization="float", clock_offset_ppm=0.0)


def one(x, y, name="r"):
    return sim.Scene((sim.Person(name, PlanarPoint(x, y)),), fov=math.radians(170))


def inst_freq(x, rate, smooth=101):
    ph = np.unwrap(np.angle(hilbert(x)))
    f = np.diff(ph) * rate / (2 * np.pi)
    k = np.ones(smooth) / smooth
    return np.convolve(f, k, mode="same")


def test_noiseless_sweep_integrates_to_peak():
    tr = sim.synthesize_sweep(3.4, 1.0, 0.2, 0.0, seed=7)
    v = geo.integrate_velocity(tr.accel_readings, 0.0, 0.01)
    assert v.peak == pytest.approx(3.4, abs=1e-6)
    assert len(tr.accel_readings) == 120


def test_velocity_peaks_mid_sweep():
    tr = sim.synthesize_sweep(3.4, 1.0, 0.2, 0.0)
    t = np.arange(len(tr.velocities)) / tr.sample_rate
    assert t[np.argmax(tr.velocities)] == pytest.approx(0.2 + 0.5, abs=1 / tr.sample_rate)
    assert tr.velocities.max() == pytest.approx(3.4, abs=1e-6)
    assert tr.velocities[: int(0.2 * tr.sample_rate)].max() == 0.0


def test_displacement_matches_closed_form():
    tr = sim.synthesize_sweep(2.0, 0.5, 0.1, 0.0)
    T = min(sim.DEFAULT_MOTION_TIME, 0.5)
    assert tr.positions[-1] == pytest.approx(2.0 * T / 2, abs=1e-6)
    # positions are the running integral of velocities
    dt = 1 / tr.sample_rate
    integral = np.concatenate([[0], np.cumsum((tr.velocities[1:] + tr.velocities[:-1]) / 2) * dt])
    assert np.max(np.abs(integral - tr.positions)) < 1e-6


def test_accelerometer_error_is_seeded():
    a = sim.synthesize_sweep(3.4, seed=3).accel_readings
    b = sim.synthesize_sweep(3.4, seed=3).accel_readings
    c = sim.synthesize_sweep(3.4, seed=4).accel_readings
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sweep_rejects_bad_input():
    with pytest.raises(ConfigError):
        sim.synthesize_sweep(0.0)
    with pytest.raises(ConfigError):
        sim.synthesize_sweep(3.4, duration=0.0)


def test_stationary_segment_carries_clock_offset():
    for ppm in (-200.0, 0.0, 150.0):
        ch = sim.ChannelParams(noise_kind="none", quantization="float", clock_offset_ppm=ppm)
        tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
        rec = sim.render_recording(one(0.0, 3.0), "r", tr, channel=ch)
        seg = rec.samples[1000:int(0.5 * 44100)]
        n = 1 << 20
        spec = np.abs(np.fft.rfft(seg * np.hanning(len(seg)), n))
        f = np.fft.rfftfreq(n, 1 / 44100)
        bin_hz = 44100 / len(seg)
        expected = 20000 / (1 + ppm * 1e-6)
        assert abs(f[np.argmax(spec)] - expected) < bin_hz
        assert rec.true_rate == pytest.approx(44100 * (1 + ppm * 1e-6))


def test_receiver_dead_ahead_sees_full_doppler():
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    rec = sim.render_recording(one(-3.0, 0.0), "r", tr, channel=QUIET_FLOAT)
    f = inst_freq(rec.samples, 44100)
    peak = f[2000:-2000].max()
    assert peak == pytest.approx(geo.doppler_frequency(20000, 340, 3.4), abs=0.5)


def test_broadside_receiver_shift_bounded_by_geometry():
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    rec = sim.render_recording(one(0.0, 3.0), "r", tr, channel=QUIET_FLOAT)
    f = inst_freq(rec.samples, 44100)[2000:-2000]
    # largest |cos theta| along the path: the sweep ends, half the displacement either side
    half = tr.displacement / 2
    cos_max = half / math.hypot(half, 3.0)
    bound = geo.doppler_frequency(20000, 340, 3.4 * cos_max) - 20000
    assert np.max(np.abs(f - 20000)) <= bound + 0.5
    t_mid = int((tr.motion_start + tr.motion_time / 2 + 3.0 / 340) * 44100) - 2000
    assert abs(f[t_mid] - 20000) < 0.5


def test_receiver_on_speaker_path_is_an_error():
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    with pytest.raises(SimulationError):
        sim.render_recording(one(0.0, 0.0), "r", tr, channel=QUIET_FLOAT)


def test_recording_shape_and_range():
    tr = sim.synthesize_sweep(3.4)
    rec = sim.render_recording(one(1.0, 3.0), "r", tr, channel=sim.ChannelParams(target_snr_db=0.0), seed=2)
    assert abs(len(rec) - 1.2 * 44100) <= 1
    assert np.all(np.abs(rec.samples) <= 1.0)
    assert rec.nominal_rate == 44100
    # pcm16: every sample is an integer multiple of one step
    steps = rec.samples * 32767
    assert np.allclose(steps, np.round(steps))


def test_phase_is_continuous():
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    rec = sim.render_recording(one(-1.0, 2.5), "r", tr, channel=QUIET_FLOAT)
    ph = np.unwrap(np.angle(hilbert(rec.samples)))[2000:-2000]
    limit = 2 * np.pi * geo.doppler_frequency(20000, 340, 3.4) / 44100
    assert np.max(np.abs(np.diff(ph))) <= limit * 1.01


@pytest.mark.parametrize("kind", ["ambient", "music", "conversation"])
@pytest.mark.parametrize("snr", [0.0, 10.0, 20.0])
def test_in_band_snr_matches_target(kind, snr):
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    scene = one(0.0, 3.0)
    clean = sim.render_recording(scene, "r", tr, channel=QUIET_FLOAT, seed=5)
    ch = sim.ChannelParams(noise_kind=kind, target_snr_db=snr, quantization="float", clock_offset_ppm=0.0)
    noisy = sim.render_recording(scene, "r", tr, channel=ch, seed=5)
    noise = noisy.samples - clean.samples
    p_sig = sim.band_power(clean.samples, 44100, 19500, 20500)
    p_noise = sim.band_power(noise, 44100, 19500, 20500)
    assert 10 * math.log10(p_sig / p_noise) == pytest.approx(snr, abs=1.0)


def test_amplitude_halves_when_distance_doubles():
    tr = sim.synthesize_sweep(3.4, accel_noise_rms=0.0)
    near = sim.render_recording(one(0.0, 3.0), "r", tr, channel=QUIET_FLOAT)
    far = sim.render_recording(one(0.0, 6.0), "r", tr, channel=QUIET_FLOAT)
    seg = slice(2000, int(0.4 * 44100))
    ratio = np.sqrt(np.mean(near.samples[seg] ** 2) / np.mean(far.samples[seg] ** 2))
    d0 = tr.location_at(0.0)
    expected = math.hypot(d0[0], 6.0) / math.hypot(d0[0], 3.0)
    assert ratio == pytest.approx(expected, rel=1e-3)
    assert ratio == pytest.approx(2.0, rel=0.01)


def test_single_receiver_session():
    s = sim.simulate_session(one(0.0, 3.0), channel=sim.ChannelParams.quiet())
    assert list(s.recordings) == ["A"]
    assert list(s.recordings["A"]) == ["r"]
    assert s.ground_truth.rows == [["r"]]


def test_session_is_bit_identical_per_seed():
    scene = sim.line_scene(6, 3.0)
    for seed in range(20):
        a = sim.simulate_session(scene, seed=seed)
        b = sim.simulate_session(scene, seed=seed)
        for name in a.recordings["A"]:
            assert np.array_equal(a.recordings["A"][name].samples, b.recordings["A"][name].samples)
    c = sim.simulate_session(scene, seed=1)
    assert not np.array_equal(a.recordings["A"]["p1"].samples, c.recordings["A"]["p1"].samples)


def test_two_sweep_session_layout():
    scene = sim.rows_scene(3, 2)
    s = sim.simulate_session(scene, sim.SweepPlan(sweeps=2, L=3.0, W=1.0), sim.ChannelParams.quiet())
    assert sum(len(r) for r in s.recordings.values()) == 12
    assert [set(r) for r in s.ground_truth.rows] == [set(r) for r in scene.rows_ground_truth]
    for row in s.ground_truth.rows:
        xs = [scene.position_of(n).x for n in row]
        assert xs == sorted(xs)


def test_multi_row_scene_needs_two_sweeps():
    with pytest.raises(ConfigError):
        sim.simulate_session(sim.rows_scene(2, 2), sim.SweepPlan())
    with pytest.raises(ConfigError):
        sim.SweepPlan(sweeps=2, L=3.0)
    with pytest.raises(ConfigError):
        sim.simulate_session(one(0.0, -2.0), sim.SweepPlan())


def test_ground_truth_fov_membership():
    people = tuple(sim.Person(f"m{a}", PlanarPoint(-3 * math.sin(math.radians(a)), 3 * math.cos(math.radians(a))))
                   for a in (30, 0, -30))
    by = (sim.Person("out", PlanarPoint(-3 * math.sin(math.radians(40)), 3 * math.cos(math.radians(40)))),)
    truth = sim.ground_truth_layout(sim.Scene(people, bystanders=by))
    assert truth.rows == [["m30", "m0", "m-30"]]
    assert truth.excluded == {"out": "out_of_fov"}


def test_scene_validation():
    p = sim.Person("a", PlanarPoint(0, 3))
    with pytest.raises(SceneError, match="duplicate"):
        sim.Scene((p, p))
    with pytest.raises(SceneError):
        sim.Scene(())
    with pytest.raises(SceneError, match="rows"):
        sim.Scene((p,), rows_ground_truth=(("a",), ("zed",)))


@pytest.mark.parametrize("doc,field", [
    ({}, "receivers"),
    ({"receivers": [{"name": "a"}]}, "receivers[0].position"),
    ({"receivers": [{"name": "a", "position": [0, "x"]}]}, "receivers[0].position"),
    ({"receivers": [{"name": "", "position": [0, 3]}]}, "receivers[0].name"),
    ({"receivers": [{"name": "a", "position": [0, 3]}], "fov_deg": 200}, "fov_deg"),
    ({"receivers": [{"name": "a", "position": [0, 3]}], "colour": 1}, "colour"),
    ({"receivers": [{"name": "a", "position": [0, 3]}], "rows": "a"}, "rows"),
])
def test_scene_schema_errors_name_the_field(doc, field):
    with pytest.raises(SceneError) as exc:
        sim.Scene.from_dict(doc)
    assert exc.value.field == field


def test_scene_round_trip_and_frame():
    doc = {"fov_deg": 60, "camera": {"position": [1.0, 1.0], "heading_deg": 0.0},
           "receivers": [{"name": "a", "position": [4.0, 2.0]}], "bystanders": [{"name": "b", "position": [4.0, 0.0]}]}
    scene = sim.Scene.from_dict(doc)
    # camera looks along +x: a point to the camera's left (+y world) is picture-left, negative lateral
    local = scene.position_of("a")
    assert local.x == pytest.approx(-1.0) and local.y == pytest.approx(3.0)
    again = sim.Scene.from_dict(scene.to_dict())
    assert again == scene


def test_wav_round_trip(tmp_path):
    tr = sim.synthesize_sweep(3.4)
    rec = sim.render_recording(one(0.5, 3.0), "r", tr, seed=1)
    path = tmp_path / "r_A.wav"
    sim.write_wav(path, rec)
    back = sim.read_wav(path)
    assert back.receiver_name == "r_A"
    assert back.nominal_rate == 44100
    assert np.array_equal(back.samples, rec.samples)


def test_channel_validation():
    with pytest.raises(ConfigError):
        sim.ChannelParams(clock_offset_ppm=250)
    with pytest.raises(ConfigError):
        sim.ChannelParams(target_snr_db=math.inf)
    with pytest.raises(ConfigError):
        sim.ChannelParams(noise_kind="traffic")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_default_clock_offset_within_30_ppm(seed):
    ppm = sim.clock_offset_for(sim.ChannelParams(), seed, "x")
    assert -30 <= ppm <= 30
