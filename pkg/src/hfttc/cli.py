"""Command-line entry point: train, evaluate, safety, scenario.

All outputs land under the configured output directory (``--out``, else
``$HFTTC_OUT``, else ./hfttc_out). Every subcommand is deterministic for a
fixed seed; the only nondeterministic bytes are the wall-clock column of
the training log. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

from .data import (
    SplitSpec,
    build_scene_set,
    load_recordings,
    load_scenario_spec,
    load_scene_cache,
    split_scenes,
    synth_scenario,
)
from .errors import ConfigError, DataError, DivergenceError
from .hypergraph import cosine_affinity, groups_from_topology, infer_topology, topology_summary
from .model import (
    PredictorConfig,
    embed_history,
    init_params,
    load_model,
    save_model,
)
from .plots import render_pair_risk, write_cdf_csv
from .safety import SafetyThresholds, scenario_risk
from .training import (
    BEHAVIOR_MODES,
    TrainConfig,
    constant_velocity_metrics,
    evaluate,
    train,
    write_train_log,
)

DEFAULTS = {
    "data": None, "checkpoint": None, "out": None, "config": None,
    "seed": 0, "tau": 0.5, "modes": 5, "lambda_weight": 1.0, "lr": 1e-3,
    "steps": 200, "batch": 16, "node_dim": 64, "layers": 2,
    "history_frames": 30, "future_frames": 50, "stride": 10, "radius": 50.0,
    "behavior": "average", "ablate": None,
    "rx": 5.0, "ry": 2.0, "horizon": 10.0, "traditional": False,
    "spec": None, "window": None, "scene_index": 0,
}

# CLI dest -> PredictorConfig field, for sidecar cross-checking.
_MODEL_FIELDS = {
    "tau": "tau", "modes": "n_modes", "node_dim": "node_dim", "layers": "n_layers",
    "history_frames": "t_history", "future_frames": "t_predict",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfttc",
        description="Interaction-aware trajectory prediction and stochastic "
                    "time-to-collision analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    common.add_argument("--data", help="recording CSV, directory of CSVs, or scene cache (.npz)")
    common.add_argument("--checkpoint", help="model checkpoint path (default <out>/checkpoint.json)")
    common.add_argument("--out", help="output directory (default $HFTTC_OUT or ./hfttc_out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--tau", type=float, help="affinity threshold in [-1, 1]")
    common.add_argument("--modes", type=int, help="number of trajectory hypotheses M")
    common.add_argument("--lambda", dest="lambda_weight", type=float,
                        help="weight of the mode-average loss term")
    common.add_argument("--lr", type=float)
    common.add_argument("--steps", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--node-dim", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--history-frames", type=int)
    common.add_argument("--future-frames", type=int)
    common.add_argument("--stride", type=int, help="scene window stride in frames")
    common.add_argument("--radius", type=float, help="neighbor radius in meters")
    common.add_argument("--behavior", choices=list(BEHAVIOR_MODES) + ["all"])
    common.add_argument("--ablate", choices=["gnn", "deterministic", "kinematic"])
    common.add_argument("--rx", type=float, help="longitudinal collision gate [m]")
    common.add_argument("--ry", type=float, help="lateral collision gate [m]")
    common.add_argument("--horizon", type=float, help="risk search horizon [s]")
    common.add_argument("--traditional", action="store_const", const=True,
                        help="overlay the constant-velocity TTC on CDF plots")

    sub.add_parser("train", parents=[common], help="fit the predictor on the train split")
    sub.add_parser("evaluate", parents=[common], help="displacement metrics on the test split")
    safety = sub.add_parser("safety", parents=[common], help="risk distributions for one scene")
    safety.add_argument("--scene-index", type=int, help="which built scene to analyze")
    scenario = sub.add_parser("scenario", parents=[common],
                              help="synthesize a scripted scene and run the full pipeline")
    scenario.add_argument("--spec", help="scenario spec JSON (path or bundled name)")
    scenario.add_argument("--window", type=float,
                          help="emit snapshots at 1 s intervals over this many seconds")
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[dict, set[str]]:
    """Merge defaults, optional config file, and explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    explicit: set[str] = set()
    for dest in DEFAULTS:
        value = getattr(args, dest, None)
        if value is not None:
            cfg[dest] = value
            explicit.add(dest)
    cfg["out"] = cfg["out"] or os.environ.get("HFTTC_OUT") or "hfttc_out"
    if cfg["traditional"] is None:
        cfg["traditional"] = False
    return cfg, explicit


def model_config(cfg: dict) -> PredictorConfig:
    modes = 1 if cfg["ablate"] == "deterministic" else cfg["modes"]
    return PredictorConfig(
        node_dim=cfg["node_dim"], n_layers=cfg["layers"], n_modes=modes,
        tau=cfg["tau"], t_history=cfg["history_frames"], t_predict=cfg["future_frames"],
        gnn_ablation=cfg["ablate"] == "gnn", kinematic_host=cfg["ablate"] == "kinematic")


def out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out_dir(cfg) / "checkpoint.json"


def load_scenes(cfg: dict):
    if not cfg["data"]:
        raise DataError("no input data; pass --data")
    path = Path(cfg["data"])
    if path.suffix == ".npz":
        scenes = load_scene_cache(path)
        t_h, t_p = cfg["history_frames"], cfg["future_frames"]
        if scenes and (scenes[0].history.shape[1] != t_h or scenes[0].future.shape[1] != t_p):
            raise ConfigError(
                f"scene cache windows ({scenes[0].history.shape[1]}, {scenes[0].future.shape[1]}) "
                f"do not match the configured ({t_h}, {t_p})")
        return scenes
    recordings = load_recordings(path)
    return build_scene_set(recordings, t_history=cfg["history_frames"],
                           t_predict=cfg["future_frames"], stride=cfg["stride"],
                           radius=cfg["radius"])


def load_checkpoint(cfg: dict, explicit: set[str]):
    path = checkpoint_path(cfg)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    overrides = {_MODEL_FIELDS[d]: cfg[d] for d in _MODEL_FIELDS if d in explicit}
    if cfg["ablate"] == "gnn":
        overrides["gnn_ablation"] = True
    elif cfg["ablate"] == "kinematic":
        overrides["kinematic_host"] = True
    params, mcfg = load_model(path, overrides)
    if cfg["ablate"] == "deterministic" and mcfg.n_modes != 1:
        raise ConfigError("the deterministic ablation needs a checkpoint trained with --modes 1 "
                          "(or --ablate deterministic at train time)")
    return params, mcfg


def behaviors_from(cfg: dict) -> tuple[str, ...]:
    return BEHAVIOR_MODES if cfg["behavior"] == "all" else (cfg["behavior"],)


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_train(cfg: dict, explicit: set[str]) -> int:
    out = out_dir(cfg)
    scenes = load_scenes(cfg)
    train_scenes, test_scenes = split_scenes(scenes, SplitSpec(seed=cfg["seed"]))
    mcfg = model_config(cfg)
    params = init_params(mcfg, cfg["seed"])
    train_cfg = TrainConfig(lambda_weight=cfg["lambda_weight"], lr=cfg["lr"],
                            steps=cfg["steps"], batch_size=cfg["batch"], seed=cfg["seed"])
    result = train(train_scenes, params, mcfg, train_cfg)
    ckpt = checkpoint_path(cfg)
    save_model(params, mcfg, ckpt)
    write_train_log(result.curve, out / "train_log.csv")
    first = result.curve[0][1] if result.curve else float("nan")
    last = result.curve[-1][1] if result.curve else float("nan")
    print(f"trained {train_cfg.steps} steps on {len(train_scenes)} scenes "
          f"({len(test_scenes)} held out): loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"train log: {out / 'train_log.csv'}")
    return 0


def cmd_evaluate(cfg: dict, explicit: set[str]) -> int:
    out = out_dir(cfg)
    params, mcfg = load_checkpoint(cfg, explicit)
    scenes = load_scenes(cfg)
    _, test_scenes = split_scenes(scenes, SplitSpec(seed=cfg["seed"]))
    reports = {b: evaluate(test_scenes, params, mcfg, b) for b in behaviors_from(cfg)}
    reports["constant_velocity"] = constant_velocity_metrics(test_scenes, mcfg.t_predict)
    dump_json({name: rep.to_dict() for name, rep in reports.items()}, out / "metrics.json")
    with open(out / "rmse_horizons.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["behavior", "horizon_frames", "rmse"])
        for name in sorted(reports):
            for h, v in sorted(reports[name].rmse_by_horizon.items()):
                writer.writerow([name, h, repr(v)])
    for name in sorted(reports):
        rep = reports[name]
        print(f"{name}: ADE {rep.ade:.4f}  FDE {rep.fde:.4f}  MAE {rep.mae:.4f}  "
              f"RMSE {rep.rmse:.4f}  ({rep.n_vehicles} vehicles)")
    print(f"metrics: {out / 'metrics.json'}")
    return 0


def _emit_risk_artifacts(risks, thr, out: Path, label: str, overlay: bool) -> None:
    for risk in risks:
        stem = f"{label}_{risk.host_id}-{risk.ambient_id}_{risk.behavior}"
        render_pair_risk(risk, thr, out / f"{stem}.svg", show_traditional=overlay)
        write_cdf_csv(risk, thr, out / f"{stem}.csv")


def cmd_safety(cfg: dict, explicit: set[str]) -> int:
    out = out_dir(cfg)
    params, mcfg = load_checkpoint(cfg, explicit)
    scenes = load_scenes(cfg)
    idx = cfg["scene_index"]
    if not 0 <= idx < len(scenes):
        raise ConfigError(f"scene index {idx} out of range (0..{len(scenes) - 1})")
    scene = scenes[idx]
    thr = SafetyThresholds(r_x=cfg["rx"], r_y=cfg["ry"], horizon=cfg["horizon"], dt=scene.dt)
    risks = scenario_risk(scene, params, mcfg, thr, behaviors=behaviors_from(cfg))
    label = scene.label()
    dump_json({
        "scene": label,
        "thresholds": {"r_x": thr.r_x, "r_y": thr.r_y, "horizon": thr.horizon, "dt": thr.dt},
        "pairs": [r.to_dict() for r in risks],
    }, out / "risk_report.json")
    _emit_risk_artifacts(risks, thr, out, label, cfg["traditional"])
    print(f"analyzed scene {label}: {len(risks)} pair distributions")
    print(f"risk report: {out / 'risk_report.json'}")
    return 0


def _resolve_spec_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("hfttc") / "scenarios" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"scenario spec not found: {name}")


def _dump_scripted_tracks(spec: dict, n_frames: int, path: Path) -> None:
    from .data import scripted_track

    dt = float(spec.get("dt", 0.1))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "frame", "t", "x", "y"])
        for i, veh in enumerate(spec.get("vehicles", [])):
            vid = str(veh.get("id", i))
            track = scripted_track(veh, dt, n_frames - 1)
            for frame, (x, y) in enumerate(track):
                writer.writerow([vid, frame, repr(round(frame * dt, 6)),
                                 repr(float(x)), repr(float(y))])


def cmd_scenario(cfg: dict, explicit: set[str]) -> int:
    out = out_dir(cfg)
    if not cfg["spec"]:
        raise ConfigError("no scenario spec; pass --spec")
    spec = load_scenario_spec(_resolve_spec_path(cfg["spec"]))
    mcfg = model_config(cfg)
    ckpt = checkpoint_path(cfg)
    if ckpt.exists():
        params, mcfg = load_checkpoint(cfg, explicit)
        print(f"using checkpoint {ckpt}")
    else:
        params = init_params(mcfg, cfg["seed"])
        print(f"no checkpoint at {ckpt}; using seeded untrained parameters")
    dt = float(spec.get("dt", 0.1))
    window_s = cfg["window"] if cfg["window"] is not None else float(spec.get("window_s", 0.0))
    snapshots = int(round(window_s)) + 1
    frames_per_second = int(round(1.0 / dt))
    total_frames = (mcfg.t_history - 1) + (snapshots - 1) * frames_per_second + mcfg.t_predict + 1
    _dump_scripted_tracks(spec, total_frames, out / "trajectories.csv")
    thr = SafetyThresholds(r_x=cfg["rx"], r_y=cfg["ry"], horizon=cfg["horizon"], dt=dt)
    behaviors = behaviors_from(cfg)
    for k in range(snapshots):
        anchor = mcfg.t_history - 1 + k * frames_per_second
        scene = synth_scenario(spec, mcfg.t_history, mcfg.t_predict, anchor_frame=anchor)
        tag = f"t{k}s"
        feats = embed_history(scene.history, params, mcfg).data
        affinity = cosine_affinity(feats)
        topology = infer_topology(affinity, mcfg.tau)
        dump_json(topology_summary(affinity, mcfg.tau, topology,
                                   groups_from_topology(topology)),
                  out / f"topology_{tag}.json")
        risks = scenario_risk(scene, params, mcfg, thr, behaviors=behaviors)
        dump_json({
            "snapshot_s": float(k),
            "scene": scene.label(),
            "pairs": [r.to_dict() for r in risks],
        }, out / f"risk_{tag}.json")
        _emit_risk_artifacts(risks, thr, out, f"{tag}_{scene.label()}", cfg["traditional"])
        print(f"snapshot {k}s: {len(risks)} pair distributions")
    print(f"artifacts under {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "safety": cmd_safety,
    "scenario": cmd_scenario,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, explicit = resolve_config(args)
        return COMMANDS[args.command](cfg, explicit)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
