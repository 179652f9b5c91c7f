import json
import math

import numpy as np
import pytest

from hfttc.errors import ConfigError, DataError
from hfttc.data import (
    Scene,
    SplitSpec,
    build_scene_set,
    build_scenes,
    infer_frame_interval,
    interacting_corpus,
    load_recordings,
    load_scenario_spec,
    load_scene_cache,
    load_trajectories,
    save_scene_cache,
    scripted_track,
    split_scenes,
    synth_scenario,
)
from hfttc.dynamics import steering_to_yaw_rate


def write_csv(path, rows, header="vehicle_id,frame,t,x,y"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def linear_rows(vid, n, dt=0.1, x0=0.0, y0=0.0, vx=10.0, vy=0.0, frame0=0):
    return [f"{vid},{frame0 + k},{(frame0 + k) * dt:.3f},{x0 + vx * k * dt:.6f},{y0 + vy * k * dt:.6f}"
            for k in range(n)]


def segment_endpoint(state, a, omega, total_t):
    """Closed-form endpoint under constant (a, omega); state = (x, y, psi, v)."""
    x0, y0, psi0, v0 = state
    vT = v0 + a * total_t
    psiT = psi0 + omega * total_t
    if omega == 0.0:
        s = v0 * total_t + 0.5 * a * total_t ** 2
        return (x0 + s * math.cos(psi0), y0 + s * math.sin(psi0), psi0, vT)
    x = x0 + (vT * math.sin(psiT) - v0 * math.sin(psi0)) / omega \
        + a / omega ** 2 * (math.cos(psiT) - math.cos(psi0))
    y = y0 - (vT * math.cos(psiT) - v0 * math.cos(psi0)) / omega \
        + a / omega ** 2 * (math.sin(psiT) - math.sin(psi0))
    return (x, y, psiT, vT)


class TestLoader:
    def test_counts_records(self, tmp_path):
        rows = linear_rows("1", 100) + linear_rows("2", 100, y0=4.0)
        recs = load_trajectories(write_csv(tmp_path / "r.csv", rows))
        assert len(recs) == 200

    def test_duplicate_row_named(self, tmp_path):
        rows = linear_rows("1", 5)
        rows.insert(3, rows[2])
        with pytest.raises(DataError, match="row 5"):
            load_trajectories(write_csv(tmp_path / "r.csv", rows))

    def test_frame_interval_inferred(self, tmp_path):
        recs = load_trajectories(write_csv(tmp_path / "r.csv", linear_rows("1", 20)))
        assert abs(infer_frame_interval(recs) - 0.1) < 1e-12

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("vehicle_id,frame,t,x\n1,0,0.0,1.0\n")
        with pytest.raises(DataError, match="header"):
            load_trajectories(path)

    def test_non_monotone_frames_rejected(self, tmp_path):
        rows = ["1,0,0.0,0,0", "1,2,0.2,2,0", "1,1,0.1,1,0"]
        with pytest.raises(DataError, match="row 4.*not increasing"):
            load_trajectories(write_csv(tmp_path / "r.csv", rows))

    def test_mixed_frame_interval_rejected(self, tmp_path):
        rows = ["1,0,0.0,0,0", "1,1,0.1,1,0", "1,2,0.3,2,0"]
        with pytest.raises(DataError, match="uniform"):
            load_trajectories(write_csv(tmp_path / "r.csv", rows))

    def test_missing_file(self):
        with pytest.raises(DataError, match="not found"):
            load_trajectories("/nonexistent/file.csv")

    def test_lane_column_optional(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("vehicle_id,frame,t,x,y,lane\n1,0,0.0,0,0,L2\n1,1,0.1,1,0,L2\n")
        recs = load_trajectories(path)
        assert recs[0].lane == "L2"


class TestBuildScenes:
    def make_recording(self, tmp_path, specs, n=60):
        rows = []
        for vid, kwargs in specs:
            rows += linear_rows(vid, n, **kwargs)
        return load_trajectories(write_csv(tmp_path / "rec.csv", rows))

    def test_isolated_vehicle_has_empty_ambient(self, tmp_path):
        recs = self.make_recording(tmp_path, [("1", {})])
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=10)
        assert scenes and all(s.ambient_ids == [] for s in scenes)
        assert all(s.n_vehicles == 1 for s in scenes)

    def test_host_anchor_is_origin_heading_x(self, tmp_path):
        recs = self.make_recording(tmp_path, [("1", {"vx": 3.0, "vy": 4.0})])
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=7)
        for s in scenes:
            np.testing.assert_allclose(s.history[0, -1], [0.0, 0.0], atol=1e-9)
            step = s.history[0, -1] - s.history[0, -2]
            assert abs(math.atan2(step[1], step[0])) < 1e-9  # +x heading
            # future continues along +x for straight motion
            assert s.future[0, 0, 0] > 0 and abs(s.future[0, 0, 1]) < 1e-9

    def test_radius_and_cap_limit_neighbors(self, tmp_path):
        specs = [("h", {})]
        for i in range(10):
            specs.append((f"n{i}", {"y0": (i + 1) * 3.0}))
        specs.append(("far", {"y0": 500.0}))
        recs = self.make_recording(tmp_path, specs)
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=60,
                              radius=50.0, max_neighbors=8)
        host_scenes = [s for s in scenes if s.host_id == "h"]
        assert host_scenes
        for s in host_scenes:
            assert len(s.ambient_ids) == 8  # capped, nearest first
            assert "far" not in s.ambient_ids
            assert s.ambient_ids[0] == "n0"

    def test_normalization_round_trip(self, tmp_path):
        recs = self.make_recording(
            tmp_path, [("1", {"vx": 5.0, "vy": 2.0}), ("2", {"y0": 5.0, "vx": 6.0})])
        raw = {(r.vehicle_id, r.frame): (r.x, r.y) for r in recs}
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=9)
        assert scenes
        for s in scenes:
            ids = [s.host_id] + s.ambient_ids
            for row, vid in enumerate(ids):
                hist = s.denormalize(s.history[row])
                fut = s.denormalize(s.future[row])
                for k in range(10):
                    np.testing.assert_allclose(
                        hist[k], raw[(vid, s.start_frame + k)], atol=1e-9)
                    np.testing.assert_allclose(
                        fut[k], raw[(vid, s.start_frame + 10 + k)], atol=1e-9)

    def test_partial_coverage_vehicles_excluded(self, tmp_path):
        rows = linear_rows("h", 40) + linear_rows("late", 10, frame0=25, y0=2.0)
        recs = load_trajectories(write_csv(tmp_path / "rec.csv", rows))
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=5)
        for s in scenes:
            if s.host_id == "h":
                assert "late" not in s.ambient_ids or s.start_frame >= 25

    def test_deterministic_ordering(self, tmp_path):
        recs = self.make_recording(tmp_path, [("b", {}), ("a", {"y0": 3.0})])
        scenes = build_scenes(recs, "rec", t_history=10, t_predict=10, stride=15)
        keys = [(s.recording, s.host_id, s.start_frame) for s in scenes]
        assert keys == sorted(keys)


class TestSplit:
    def synth(self, n):
        return interacting_corpus(n, seed=0, t_history=8, t_predict=10)

    def test_seventy_thirty_on_ten_recordings(self):
        scenes = self.synth(10)
        train, test = split_scenes(scenes, SplitSpec(0.7, seed=1))
        assert len({s.recording for s in train}) == 7
        assert len({s.recording for s in test}) == 3

    def test_half_on_two_recordings(self):
        scenes = self.synth(2)
        train, test = split_scenes(scenes, SplitSpec(0.5, seed=2))
        assert len(train) == 1 and len(test) == 1

    def test_same_seed_same_membership(self):
        scenes = self.synth(9)
        a = split_scenes(scenes, SplitSpec(0.7, seed=5))
        b = split_scenes(scenes, SplitSpec(0.7, seed=5))
        assert [s.recording for s in a[0]] == [s.recording for s in b[0]]

    def test_disjoint_and_complete(self):
        scenes = self.synth(8)
        train, test = split_scenes(scenes, SplitSpec(0.7, seed=3))
        train_ids = {id(s) for s in train}
        test_ids = {id(s) for s in test}
        assert not train_ids & test_ids
        assert len(train) + len(test) == len(scenes)
        recordings = {s.recording for s in train} | {s.recording for s in test}
        assert not ({s.recording for s in train} & {s.recording for s in test})
        assert recordings == {s.recording for s in scenes}

    def test_single_recording_falls_back_with_warning(self, caplog):
        scenes = self.synth(4)
        for s in scenes:
            s.recording = "only"
        with caplog.at_level("WARNING", logger="hfttc.data"):
            train, test = split_scenes(scenes, SplitSpec(0.5, seed=0))
        assert train and test
        assert any("falling back" in rec.message for rec in caplog.records)

    def test_bad_fraction_rejected(self):
        with pytest.raises(ConfigError):
            SplitSpec(1.0)


class TestScriptedScenarios:
    def test_follower_braking_shrinks_gap(self):
        spec = {
            "dt": 0.1, "host": "f",
            "vehicles": [
                {"id": "lead", "x0": 20.0, "v0": 8.0,
                 "script": [{"kind": "ramp", "a_from": 0.0, "a_to": -2.0, "duration": 3.0},
                            {"kind": "hold", "a": 0.0, "duration": 3.0}]},
                {"id": "f", "x0": 0.0, "v0": 10.0,
                 "script": [{"kind": "hold", "a": 0.0, "duration": 6.0}]},
            ],
        }
        scene = synth_scenario(spec, t_history=10, t_predict=20)
        gap = scene.future[1, :, 0] - scene.future[0, :, 0]
        assert np.all(np.diff(gap) < 0)

    def test_constant_velocity_futures_are_linear(self):
        spec = {
            "dt": 0.1, "host": "a",
            "vehicles": [
                {"id": "a", "x0": 0.0, "v0": 9.0,
                 "script": [{"kind": "hold", "a": 0.0, "duration": 5.0}]},
                {"id": "b", "x0": 5.0, "y0": 3.5, "v0": 7.0,
                 "script": [{"kind": "hold", "a": 0.0, "duration": 5.0}]},
            ],
        }
        scene = synth_scenario(spec, t_history=10, t_predict=15)
        for row in range(2):
            vel = scene.future[row, 1] - scene.future[row, 0]
            steps = scene.future[row] - scene.future[row, 0]
            expected = np.arange(15)[:, None] * vel
            np.testing.assert_allclose(steps, expected, atol=1e-9)

    def test_lane_change_matches_closed_form_lateral_offset(self):
        dt, v0, omega = 0.1, 10.0, 0.15
        spec_vehicle = {
            "id": "m", "x0": 0.0, "y0": 0.0, "psi0": 0.0, "v0": v0,
            "script": [
                {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": 1.0},
                {"kind": "hold", "a": 0.0, "omega": omega, "duration": 1.0},
                {"kind": "hold", "a": 0.0, "omega": -omega, "duration": 1.0},
                {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": 1.0},
            ],
        }
        track = scripted_track(spec_vehicle, dt, 40)
        state = (0.0, 0.0, 0.0, v0)
        for a, w, t in [(0, 0, 1.0), (0, omega, 1.0), (0, -omega, 1.0), (0, 0, 1.0)]:
            state = segment_endpoint(state, a, w, t)
        assert abs(track[-1, 1] - state[1]) < 1e-6
        assert abs(track[-1, 0] - state[0]) < 1e-6

    def test_steer_kind_matches_bicycle_conversion(self):
        vehicle = {"id": "s", "v0": 10.0, "wheelbase": 3.0,
                   "script": [{"kind": "steer", "a": 0.0, "delta": 0.05, "duration": 2.0}]}
        track = scripted_track(vehicle, 0.1, 20)
        omega = steering_to_yaw_rate(10.0, 0.05, 3.0)
        state = segment_endpoint((0.0, 0.0, 0.0, 10.0), 0.0, omega, 2.0)
        np.testing.assert_allclose(track[-1], state[:2], atol=1e-6)

    def test_infeasible_braking_rejected(self):
        spec = {"dt": 0.1, "vehicles": [
            {"id": "x", "v0": 2.0,
             "script": [{"kind": "hold", "a": -4.0, "duration": 2.0}]}]}
        with pytest.raises(ConfigError, match="infeasible"):
            synth_scenario(spec, t_history=5, t_predict=10)

    def test_bad_specs_rejected(self):
        with pytest.raises(ConfigError, match="no vehicles"):
            synth_scenario({"dt": 0.1, "vehicles": []}, 5, 5)
        with pytest.raises(ConfigError, match="duplicate"):
            synth_scenario({"vehicles": [{"id": "a", "v0": 1,
                                          "script": [{"kind": "hold", "duration": 2.0}]},
                                         {"id": "a", "v0": 1,
                                          "script": [{"kind": "hold", "duration": 2.0}]}]}, 5, 5)
        with pytest.raises(ConfigError, match="unknown script kind"):
            synth_scenario({"vehicles": [{"id": "a", "v0": 1,
                                          "script": [{"kind": "warp", "duration": 1.0}]}]}, 5, 5)
        with pytest.raises(ConfigError, match="host id"):
            synth_scenario({"host": "zz", "vehicles": [
                {"id": "a", "v0": 1, "script": [{"kind": "hold", "duration": 2.0}]}]}, 5, 5)


class TestCorpus:
    def test_deterministic_and_well_formed(self):
        a = interacting_corpus(6, seed=7, t_history=8, t_predict=10)
        b = interacting_corpus(6, seed=7, t_history=8, t_predict=10)
        assert len(a) == 6
        for s1, s2 in zip(a, b):
            np.testing.assert_array_equal(s1.history, s2.history)
            np.testing.assert_array_equal(s1.future, s2.future)
        kinds = {s.recording.split("-")[-1] for s in a}
        assert kinds == {"platoon", "lane_change"}
        for s in a:
            assert s.history.shape[1:] == (8, 2)
            assert s.future.shape[1:] == (10, 2)
            assert s.n_vehicles >= 3
            np.testing.assert_allclose(s.history[0, -1], [0, 0], atol=1e-9)

    def test_frames_do_not_leak(self):
        for s in interacting_corpus(4, seed=1, t_history=6, t_predict=8):
            # future picks up exactly where history ends, one step later
            step = np.linalg.norm(s.future[0, 0] - s.history[0, -1])
            assert 0 <= step < 3.0


class TestSceneCache:
    def test_round_trip(self, tmp_path):
        scenes = interacting_corpus(3, seed=2, t_history=6, t_predict=8)
        path = tmp_path / "scenes.npz"
        save_scene_cache(scenes, path)
        loaded = load_scene_cache(path)
        assert len(loaded) == 3
        for a, b in zip(scenes, loaded):
            assert a.recording == b.recording and a.host_id == b.host_id
            assert a.ambient_ids == b.ambient_ids
            np.testing.assert_array_equal(a.history, b.history)
            np.testing.assert_array_equal(a.future, b.future)
            assert a.dt == b.dt and a.rotation == b.rotation

    def test_schema_mismatch_rejected(self, tmp_path):
        path = tmp_path / "scenes.npz"
        np.savez_compressed(path,
                            schema=np.frombuffer(b"bogus", dtype=np.uint8),
                            version=np.array([1]),
                            meta=np.frombuffer(b"[]", dtype=np.uint8))
        with pytest.raises(DataError, match="schema"):
            load_scene_cache(path)


def test_load_scenario_spec_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_scenario_spec(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_scenario_spec(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"dt": 0.1, "vehicles": []}))
    assert load_scenario_spec(good) == {"dt": 0.1, "vehicles": []}


def test_multi_recording_directory(tmp_path):
    d = tmp_path / "recs"
    d.mkdir()
    write_csv(d / "a.csv", linear_rows("1", 30))
    write_csv(d / "b.csv", linear_rows("1", 30, y0=5.0))
    recs = load_recordings(d)
    assert set(recs) == {"a", "b"}
    scenes = build_scene_set(recs, t_history=10, t_predict=10, stride=10)
    assert {s.recording for s in scenes} == {"a", "b"}
