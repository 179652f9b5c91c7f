import csv
import json

import numpy as np
import pytest

from hfttc.cli import main
from hfttc.model import init_params, load_model
from hfttc.numerics import load_params

WINDOW_FLAGS = ["--history-frames", "10", "--future-frames", "10", "--stride", "10"]
SMALL_MODEL = ["--node-dim", "12", "--layers", "1", "--modes", "2"]


def write_recording(path, vehicles, n=60, dt=0.1):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "frame", "t", "x", "y"])
        for vid, (x0, y0, vx, vy) in vehicles.items():
            for k in range(n):
                t = k * dt
                w.writerow([vid, k, round(t, 3), x0 + vx * t, y0 + vy * t])
    return path


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    rng = np.random.default_rng(0)
    for rec in range(2):
        vehicles = {}
        for vid in range(3):
            vehicles[str(vid)] = (float(rng.uniform(-10, 10)), float(rng.uniform(-6, 6)),
                                  float(rng.uniform(4, 9)), float(rng.uniform(-0.5, 0.5)))
        write_recording(d / f"rec{rec}.csv", vehicles)
    return d


def run(*argv):
    return main([str(a) for a in argv])


def train_args(dataset, out, extra=()):
    return ["train", "--data", dataset, "--out", out, "--seed", "7",
            "--steps", "8", "--batch", "4", *SMALL_MODEL, *WINDOW_FLAGS, *extra]


class TestTrain:
    def test_happy_path_writes_artifacts(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run(*train_args(dataset, out)) == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "checkpoint.json.meta.json").exists()
        log = (out / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,best_of_M_term,average_term,wall_ms"
        assert len(log) == 9

    def test_missing_data_exits_3_naming_path(self, tmp_path, capsys):
        code = run("train", "--data", tmp_path / "nope.csv", "--out", tmp_path / "o")
        assert code == 3
        assert "nope.csv" in capsys.readouterr().err

    def test_zero_lr_leaves_parameters_unchanged(self, dataset, tmp_path, caplog):
        out = tmp_path / "out"
        with caplog.at_level("WARNING", logger="hfttc.training"):
            assert run(*train_args(dataset, out, extra=["--lr", "0"])) == 0
        assert any("learning rate is 0" in rec.message for rec in caplog.records)
        params, cfg = load_model(out / "checkpoint.json")
        fresh = init_params(cfg, 7)
        for name, t in fresh.items():
            assert np.array_equal(params[name].data, t.data)

    def test_config_file_merge_and_unknown_keys(self, dataset, tmp_path, capsys):
        out = tmp_path / "out"
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"steps": 8, "batch": 4, "node_dim": 12, "layers": 1,
                                      "modes": 2, "history_frames": 10, "future_frames": 10,
                                      "stride": 10, "seed": 7}))
        assert run("train", "--data", dataset, "--out", out, "--config", config) == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"stepz": 5}))
        assert run("train", "--data", dataset, "--out", out, "--config", bad) == 2
        assert "stepz" in capsys.readouterr().err

    def test_env_var_output_dir(self, dataset, tmp_path, monkeypatch):
        env_out = tmp_path / "envout"
        monkeypatch.setenv("HFTTC_OUT", str(env_out))
        assert run("train", "--data", dataset, "--seed", "7", "--steps", "2",
                   "--batch", "2", *SMALL_MODEL, *WINDOW_FLAGS) == 0
        assert (env_out / "checkpoint.json").exists()


class TestEvaluate:
    @pytest.fixture
    def trained(self, dataset, tmp_path):
        out = tmp_path / "out"
        assert run(*train_args(dataset, out)) == 0
        return out

    def test_all_behaviors_plus_baseline(self, dataset, trained):
        assert run("evaluate", "--data", dataset, "--out", trained, "--seed", "7",
                   "--behavior", "all", *WINDOW_FLAGS) == 0
        metrics = json.loads((trained / "metrics.json").read_text())
        assert set(metrics) == {"last_step", "average", "self_prediction", "constant_velocity"}
        rows = (trained / "rmse_horizons.csv").read_text().splitlines()
        assert rows[0] == "behavior,horizon_frames,rmse"
        assert len(rows) == 1 + 4  # one 10-frame horizon per report

    def test_sidecar_mismatch_exits_2(self, dataset, trained, capsys):
        code = run("evaluate", "--data", dataset, "--out", trained, "--seed", "7",
                   "--modes", "5", *WINDOW_FLAGS)
        assert code == 2
        assert "n_modes" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, dataset, tmp_path, capsys):
        code = run("evaluate", "--data", dataset, "--out", tmp_path / "empty", "--seed", "7",
                   *WINDOW_FLAGS)
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_gnn_ablation_override_allowed(self, dataset, trained):
        assert run("evaluate", "--data", dataset, "--out", trained, "--seed", "7",
                   "--ablate", "gnn", *WINDOW_FLAGS) == 0

    def test_deterministic_ablation_requires_single_mode(self, dataset, trained, capsys):
        code = run("evaluate", "--data", dataset, "--out", trained, "--seed", "7",
                   "--ablate", "deterministic", *WINDOW_FLAGS)
        assert code == 2
        assert "modes 1" in capsys.readouterr().err


class TestSafety:
    def test_no_collision_scene(self, tmp_path):
        d = tmp_path / "data"
        d.mkdir()
        # far-apart parallel vehicles, same speed: nothing ever closes in
        write_recording(d / "apart.csv", {
            "0": (0.0, 0.0, 8.0, 0.0),
            "1": (0.0, 30.0, 8.0, 0.0),
        })
        out = tmp_path / "out"
        assert run(*train_args(d, out)) == 0
        assert run("safety", "--data", d, "--out", out, "--seed", "7",
                   "--horizon", "6", "--traditional", *WINDOW_FLAGS) == 0
        report = json.loads((out / "risk_report.json").read_text())
        assert report["pairs"], "expected at least one pair"
        for pair in report["pairs"]:
            assert pair["no_event_mass"] == 1.0
            assert pair["ttc_atoms"] == []
            assert pair["traditional_ttc"] is None
        cdf_files = list(out.glob("*_average.csv"))
        assert cdf_files
        rows = cdf_files[0].read_text().splitlines()[1:]
        assert all(float(r.split(",")[1]) == 0.0 for r in rows)
        assert list(out.glob("*_average.svg"))

    def test_scene_index_out_of_range_exits_2(self, dataset, tmp_path, capsys):
        out = tmp_path / "out"
        assert run(*train_args(dataset, out)) == 0
        code = run("safety", "--data", dataset, "--out", out, "--seed", "7",
                   "--scene-index", "9999", *WINDOW_FLAGS)
        assert code == 2
        assert "out of range" in capsys.readouterr().err


class TestScenario:
    def test_bundled_platoon_smoke(self, tmp_path):
        out = tmp_path / "scen"
        assert run("scenario", "--spec", "platoon_brake.json", "--out", out, "--seed", "3",
                   *SMALL_MODEL, "--history-frames", "10", "--future-frames", "10",
                   "--horizon", "6") == 0
        report = json.loads((out / "risk_t0s.json").read_text())
        ambient = {p["pair"][1] for p in report["pairs"]}
        assert ambient == {"p0", "p1", "p2"}
        assert (out / "trajectories.csv").exists()
        assert (out / "topology_t0s.json").exists()

    def test_window_emits_per_second_snapshots(self, tmp_path):
        out = tmp_path / "scen"
        assert run("scenario", "--spec", "lane_change.json", "--out", out, "--seed", "3",
                   *SMALL_MODEL, "--history-frames", "10", "--future-frames", "10",
                   "--horizon", "6", "--window", "4") == 0
        for k in range(5):
            assert (out / f"risk_t{k}s.json").exists()
            assert (out / f"topology_t{k}s.json").exists()

    def test_invalid_spec_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dt": 0.1, "vehicles": []}))
        code = run("scenario", "--spec", bad, "--out", tmp_path / "o", "--seed", "1",
                   *SMALL_MODEL, "--history-frames", "8", "--future-frames", "8")
        assert code == 2
        assert "vehicles" in capsys.readouterr().err

    def test_missing_spec_exits_2(self, tmp_path):
        assert run("scenario", "--spec", "not_bundled.json", "--out", tmp_path / "o") == 2


def strip_wall_column(text: str) -> str:
    return "\n".join(",".join(line.split(",")[:4]) for line in text.splitlines())


class TestDeterminism:
    def test_repeat_runs_are_byte_identical(self, dataset, tmp_path):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert run(*train_args(dataset, out)) == 0
            assert run("evaluate", "--data", dataset, "--out", out, "--seed", "7",
                       "--behavior", "all", *WINDOW_FLAGS) == 0
        a, b = outs
        assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "rmse_horizons.csv").read_bytes() == (b / "rmse_horizons.csv").read_bytes()
        assert strip_wall_column((a / "train_log.csv").read_text()) == \
            strip_wall_column((b / "train_log.csv").read_text())
