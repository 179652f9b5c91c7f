"""Trajectory ingestion, scene windowing, splits, and scripted scenarios.

Recordings are flat CSV files (``vehicle_id,frame,t,x,y[,lane]``). Scenes
are sliding windows around a host vehicle, expressed in the host's frame:
the host's last observed position becomes the origin and its heading the
+x axis. Scripted scenarios roll synthetic vehicles through the dynamics
module so tests and demos get controllable ground truth.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (
    DEFAULT_WHEELBASE,
    FLAT,
    ControlInput,
    VehicleState,
    estimate_motion,
    rk4_step,
    steering_to_yaw_rate,
)
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("vehicle_id", "frame", "t", "x", "y")
DEFAULT_RADIUS = 50.0
DEFAULT_MAX_NEIGHBORS = 8


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: str
    frame: int
    t: float
    x: float
    y: float
    lane: str | None = None


@dataclass
class Scene:
    """One prediction problem: host plus neighbors in the host frame.

    Row 0 of ``history``/``future`` is the host. ``origin`` and
    ``rotation`` recover raw coordinates: raw = R(rotation) @ local + origin.
    """
    recording: str
    host_id: str
    ambient_ids: list[str]
    history: np.ndarray   # (N, T_h, 2)
    future: np.ndarray    # (N, T_p, 2)
    dt: float
    origin: np.ndarray    # (2,)
    rotation: float
    start_frame: int = 0

    @property
    def n_vehicles(self) -> int:
        return self.history.shape[0]

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return np.asarray(points) @ rot.T + self.origin

    def label(self) -> str:
        return f"{self.recording}-h{self.host_id}-f{self.start_frame}"


def load_trajectories(path) -> list[TrajectoryRecord]:
    """Parse and validate one recording file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"trajectory file not found: {path}")
    records: list[TrajectoryRecord] = []
    seen: set[tuple[str, int]] = set()
    last_frame: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header[:5]) != CSV_COLUMNS:
            raise DataError(f"{path}: header must start with {','.join(CSV_COLUMNS)}")
        has_lane = len(header) > 5 and header[5].strip() == "lane"
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vid = row[0].strip()
                frame = int(row[1])
                t, x, y = float(row[2]), float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path} row {row_no}: {exc}") from exc
            if not all(math.isfinite(v) for v in (t, x, y)):
                raise DataError(f"{path} row {row_no}: non-finite value")
            key = (vid, frame)
            if key in seen:
                raise DataError(f"{path} row {row_no}: duplicate (vehicle {vid}, frame {frame})")
            seen.add(key)
            if vid in last_frame and frame <= last_frame[vid]:
                raise DataError(f"{path} row {row_no}: frames for vehicle {vid} not increasing")
            last_frame[vid] = frame
            lane = row[5].strip() if has_lane and len(row) > 5 and row[5].strip() else None
            records.append(TrajectoryRecord(vid, frame, t, x, y, lane))
    if not records:
        raise DataError(f"{path}: no data rows")
    infer_frame_interval(records, source=str(path))
    return records


def infer_frame_interval(records: list[TrajectoryRecord], source: str = "<records>") -> float:
    """Seconds per frame, required uniform across the recording."""
    deltas = []
    by_vehicle: dict[str, list[TrajectoryRecord]] = {}
    for rec in records:
        by_vehicle.setdefault(rec.vehicle_id, []).append(rec)
    for recs in by_vehicle.values():
        for a, b in zip(recs, recs[1:]):
            deltas.append((b.t - a.t) / (b.frame - a.frame))
    if not deltas:
        raise DataError(f"{source}: need at least two frames for one vehicle")
    dt = float(np.median(deltas))
    if dt <= 0:
        raise DataError(f"{source}: non-positive frame interval")
    spread = float(np.max(np.abs(np.asarray(deltas) - dt)))
    if spread > 1e-6:
        raise DataError(f"{source}: frame interval not uniform (spread {spread:.2e}s)")
    return dt


def load_recordings(path) -> dict[str, list[TrajectoryRecord]]:
    """A file is one recording; a directory holds one per *.csv inside."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"no *.csv recordings under {path}")
        return {f.stem: load_trajectories(f) for f in files}
    return {path.stem: load_trajectories(path)}


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.asarray(points) @ np.array([[c, -s], [s, c]]).T


def build_scenes(records: list[TrajectoryRecord], recording: str,
                 t_history: int = 30, t_predict: int = 50, stride: int = 10,
                 radius: float = DEFAULT_RADIUS,
                 max_neighbors: int = DEFAULT_MAX_NEIGHBORS) -> list[Scene]:
    """Sliding-window scenes per candidate host.

    A window is kept when the host covers history and future completely;
    neighbors must cover both windows too (the arrays are dense) and sit
    within ``radius`` of the host at the anchor frame, nearest
    ``max_neighbors`` first. Coordinates are host-frame normalized.
    """
    dt = infer_frame_interval(records, source=recording)
    tracks: dict[str, dict[int, np.ndarray]] = {}
    for rec in records:
        tracks.setdefault(rec.vehicle_id, {})[rec.frame] = np.array([rec.x, rec.y])
    all_frames = sorted({rec.frame for rec in records})
    scenes: list[Scene] = []
    skipped = 0
    window = t_history + t_predict
    for host_id in sorted(tracks):
        host_frames = tracks[host_id]
        for start in range(all_frames[0], all_frames[-1] - window + 2, stride):
            frames = range(start, start + window)
            if not all(f in host_frames for f in frames):
                skipped += 1
                continue
            anchor_frame = start + t_history - 1
            host_xy = np.array([host_frames[f] for f in frames])
            _, host_psi = estimate_motion(host_xy[:t_history], dt)
            origin = host_xy[t_history - 1].copy()
            rotation = float(host_psi[-1])
            neighbors = []
            for vid in sorted(tracks):
                if vid == host_id:
                    continue
                track = tracks[vid]
                if not all(f in track for f in frames):
                    continue
                dist = float(np.linalg.norm(track[anchor_frame] - origin))
                if dist <= radius:
                    neighbors.append((dist, vid))
            neighbors.sort()
            kept = [vid for _, vid in neighbors[:max_neighbors]]
            ids = [host_id] + kept
            xy = np.stack([np.array([tracks[vid][f] for f in frames]) for vid in ids])
            local = _rotate(xy - origin, -rotation)
            scenes.append(Scene(
                recording=recording, host_id=host_id, ambient_ids=kept,
                history=local[:, :t_history], future=local[:, t_history:],
                dt=dt, origin=origin, rotation=rotation, start_frame=start,
            ))
    if skipped:
        logger.debug("%s: skipped %d windows with incomplete host coverage", recording, skipped)
    scenes.sort(key=lambda s: (s.recording, s.host_id, s.start_frame))
    return scenes


def build_scene_set(recordings: dict[str, list[TrajectoryRecord]], **kwargs) -> list[Scene]:
    scenes: list[Scene] = []
    for name in sorted(recordings):
        scenes.extend(build_scenes(recordings[name], name, **kwargs))
    if not scenes:
        raise DataError("no usable scenes could be windowed from the recordings")
    return scenes


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    group_by_recording: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train fraction {self.train_fraction} outside (0, 1)")


def split_scenes(scenes: list[Scene], spec: SplitSpec = SplitSpec()
                 ) -> tuple[list[Scene], list[Scene]]:
    """Deterministic train/test split, grouped by source recording.

    With fewer than two recordings the grouping falls back to scene level
    (with a warning) so both sides stay non-empty.
    """
    if not scenes:
        raise DataError("cannot split an empty scene list")
    rng = np.random.default_rng(spec.seed)

    def take(count: int) -> int:
        return max(1, min(count - 1, int(round(spec.train_fraction * count))))

    recordings = sorted({s.recording for s in scenes})
    if spec.group_by_recording and len(recordings) >= 2:
        order = rng.permutation(len(recordings))
        train_names = {recordings[i] for i in order[:take(len(recordings))]}
        train = [s for s in scenes if s.recording in train_names]
        test = [s for s in scenes if s.recording not in train_names]
        return train, test
    if spec.group_by_recording:
        logger.warning("only %d recording(s); falling back to scene-level split", len(recordings))
    if len(scenes) < 2:
        raise DataError("need at least two scenes to split")
    order = rng.permutation(len(scenes))
    train_idx = set(order[:take(len(scenes))].tolist())
    train = [s for i, s in enumerate(scenes) if i in train_idx]
    test = [s for i, s in enumerate(scenes) if i not in train_idx]
    return train, test


SCENE_CACHE_VERSION = 1


def _scene_schema_hash() -> str:
    fields = "recording,host_id,ambient_ids,history,future,dt,origin,rotation,start_frame"
    return hashlib.sha256(f"v{SCENE_CACHE_VERSION}:{fields}".encode()).hexdigest()[:16]


def save_scene_cache(scenes: list[Scene], path) -> None:
    """Binary scene container with an embedded schema hash."""
    meta = [{
        "recording": s.recording, "host_id": s.host_id, "ambient_ids": s.ambient_ids,
        "dt": s.dt, "rotation": s.rotation, "start_frame": s.start_frame,
    } for s in scenes]
    arrays = {"schema": np.frombuffer(_scene_schema_hash().encode(), dtype=np.uint8),
              "version": np.array([SCENE_CACHE_VERSION]),
              "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, s in enumerate(scenes):
        arrays[f"history_{i}"] = s.history
        arrays[f"future_{i}"] = s.future
        arrays[f"origin_{i}"] = s.origin
    np.savez_compressed(path, **arrays)


def load_scene_cache(path) -> list[Scene]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scene cache not found: {path}")
    with np.load(path) as data:
        schema = bytes(data["schema"]).decode()
        if schema != _scene_schema_hash():
            raise DataError(f"scene cache schema mismatch ({schema})")
        meta = json.loads(bytes(data["meta"]).decode())
        return [Scene(recording=m["recording"], host_id=m["host_id"],
                      ambient_ids=list(m["ambient_ids"]),
                      history=data[f"history_{i}"], future=data[f"future_{i}"],
                      dt=m["dt"], origin=data[f"origin_{i}"],
                      rotation=m["rotation"], start_frame=m["start_frame"])
                for i, m in enumerate(meta)]


# ---------------------------------------------------------------------------
# Scripted scenarios
# ---------------------------------------------------------------------------

SCRIPT_KINDS = ("hold", "ramp", "steer")


def _script_controls(script: list[dict], dt: float, n_frames: int,
                     wheelbase: float) -> list:
    """Per-frame control directives from script segments.

    hold:  {a, omega} constant for `duration` seconds
    ramp:  {a_from, a_to, omega} linear acceleration ramp
    steer: {a, delta} steering angle, converted per-step via the bicycle law
    """
    directives = []
    for seg in script:
        kind = seg.get("kind")
        if kind not in SCRIPT_KINDS:
            raise ConfigError(f"unknown script kind {kind!r}; expected one of {SCRIPT_KINDS}")
        steps = int(round(float(seg.get("duration", 0.0)) / dt))
        if steps <= 0:
            raise ConfigError(f"script segment needs a positive duration: {seg}")
        for k in range(steps):
            if kind == "hold":
                directives.append(("u", float(seg.get("a", 0.0)), float(seg.get("omega", 0.0))))
            elif kind == "ramp":
                frac = k / max(steps - 1, 1)
                a = float(seg.get("a_from", 0.0)) * (1 - frac) + float(seg.get("a_to", 0.0)) * frac
                directives.append(("u", a, float(seg.get("omega", 0.0))))
            else:
                directives.append(("steer", float(seg.get("a", 0.0)), float(seg["delta"])))
    if len(directives) < n_frames:
        last = directives[-1] if directives else ("u", 0.0, 0.0)
        directives.extend([last] * (n_frames - len(directives)))
    return directives[:n_frames]


def scripted_track(vehicle: dict, dt: float, n_frames: int) -> np.ndarray:
    """Roll one scripted vehicle for n_frames steps; returns n_frames+1 rows."""
    state = VehicleState(float(vehicle.get("x0", 0.0)), float(vehicle.get("y0", 0.0)),
                         float(vehicle.get("psi0", 0.0)), float(vehicle.get("v0", 0.0)))
    wheelbase = float(vehicle.get("wheelbase", DEFAULT_WHEELBASE))
    directives = _script_controls(vehicle.get("script", []), dt, n_frames, wheelbase)
    positions = [np.array([state.p_x, state.p_y])]
    for k, directive in enumerate(directives):
        if directive[0] == "steer":
            _, a, delta = directive
            u = ControlInput(a, steering_to_yaw_rate(state.v, delta, wheelbase))
        else:
            _, a, omega = directive
            u = ControlInput(a, omega)
        nxt = rk4_step(state, u, FLAT, dt, t=k * dt)
        if nxt.v == 0.0 and u.a < 0.0:
            raise ConfigError(
                f"infeasible script for vehicle {vehicle.get('id')!r}: speed would go negative "
                f"around t={k * dt:.1f}s")
        state = nxt
        positions.append(np.array([state.p_x, state.p_y]))
    return np.stack(positions)


def synth_scenario(spec: dict, t_history: int, t_predict: int,
                   anchor_frame: int | None = None) -> Scene:
    """Build one Scene out of a scripted scenario description.

    The spec holds ``dt``, ``host`` (vehicle id), and ``vehicles``; every
    vehicle needs enough scripted duration to cover both windows (plus the
    anchor offset when slicing a later snapshot).
    """
    dt = float(spec.get("dt", 0.1))
    vehicles = spec.get("vehicles", [])
    if not vehicles:
        raise ConfigError("scenario spec lists no vehicles")
    ids = [str(v.get("id", i)) for i, v in enumerate(vehicles)]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate vehicle ids in scenario spec: {ids}")
    host_id = str(spec.get("host", ids[0]))
    if host_id not in ids:
        raise ConfigError(f"host id {host_id!r} not among vehicles {ids}")
    anchor = t_history - 1 if anchor_frame is None else anchor_frame
    if anchor < t_history - 1:
        raise ConfigError(f"anchor frame {anchor} leaves no room for {t_history} history frames")
    n_frames = anchor + t_predict + 1
    tracks = {vid: scripted_track(veh, dt, n_frames - 1)
              for vid, veh in zip(ids, vehicles)}
    order = [host_id] + [vid for vid in ids if vid != host_id]
    xy = np.stack([tracks[vid] for vid in order])
    lo = anchor - t_history + 1
    window = xy[:, lo:anchor + t_predict + 1]
    host_hist = window[0, :t_history]
    _, host_psi = estimate_motion(host_hist, dt)
    origin = host_hist[-1].copy()
    rotation = float(host_psi[-1])
    local = _rotate(window - origin, -rotation)
    return Scene(
        recording=str(spec.get("name", "scenario")), host_id=host_id,
        ambient_ids=order[1:], history=local[:, :t_history],
        future=local[:, t_history:], dt=dt, origin=origin,
        rotation=rotation, start_frame=lo,
    )


def load_scenario_spec(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario spec not found: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# Synthetic interacting corpus (braking platoons and lane changes)
# ---------------------------------------------------------------------------


def _braking_script(onset: float, decel: float, v0: float, t_total: float,
                    dt: float) -> list[dict]:
    """Cruise, blend into a sustained deceleration, coast once slow."""
    brake_time = max(dt, min(t_total - onset, (v0 - 2.0) / max(decel, 1e-6)))
    return [
        {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": max(dt, onset)},
        {"kind": "ramp", "a_from": 0.0, "a_to": -decel, "omega": 0.0,
         "duration": max(dt, 0.1 * t_total)},
        {"kind": "hold", "a": -decel, "omega": 0.0, "duration": brake_time},
        {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": t_total},
    ]


def _platoon_spec(rng, t_total: float, dt: float) -> dict:
    """Same-lane platoon braking in cascade; the trailing host brakes too."""
    n_follow = int(rng.integers(2, 4))
    v0 = float(rng.uniform(9.0, 14.0))
    gap = float(rng.uniform(9.0, 14.0))
    onset = float(rng.uniform(0.12, 0.28)) * t_total
    decel = float(rng.uniform(0.8, 1.6))
    lag = 0.05 * t_total
    vehicles = []
    lead_x = n_follow * gap
    for i in range(n_follow + 1):
        vehicles.append({
            "id": f"p{i}", "x0": lead_x - i * gap, "y0": 0.0, "psi0": 0.0, "v0": v0,
            "script": _braking_script(onset + lag * i, decel, v0, t_total, dt),
        })
    v_host = v0 * float(rng.uniform(0.9, 1.0))
    vehicles.append({
        "id": "host", "x0": -(gap + 5.0), "y0": 0.0, "psi0": 0.0, "v0": v_host,
        "script": _braking_script(onset + lag * (n_follow + 1), decel * 0.9,
                                  v_host, t_total, dt),
    })
    return {"name": "platoon", "dt": dt, "host": "host", "vehicles": vehicles}


def _lane_change_spec(rng, t_total: float, dt: float) -> dict:
    """A vehicle pulses its yaw rate toward the host lane; the host eases off."""
    v_host = float(rng.uniform(9.0, 13.0))
    v_mover = float(rng.uniform(9.0, 13.0))
    onset = float(rng.uniform(0.10, 0.25)) * t_total
    pulse = float(rng.uniform(0.10, 0.18))
    pulse_time = float(rng.uniform(0.18, 0.28)) * t_total
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    mover_script = [
        {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": max(dt, onset)},
        {"kind": "hold", "a": 0.0, "omega": -side * pulse, "duration": max(dt, pulse_time)},
        {"kind": "hold", "a": 0.0, "omega": side * pulse, "duration": max(dt, pulse_time)},
        {"kind": "hold", "a": 0.0, "omega": 0.0, "duration": t_total},
    ]
    hold = [{"kind": "hold", "a": 0.0, "omega": 0.0, "duration": 2.0 * t_total}]
    vehicles = [
        {"id": "host", "x0": 0.0, "y0": 0.0, "psi0": 0.0, "v0": v_host,
         "script": _braking_script(onset + 0.1 * t_total,
                                   float(rng.uniform(0.6, 1.2)), v_host, t_total, dt)},
        {"id": "mover", "x0": float(rng.uniform(8.0, 16.0)), "y0": side * 3.6,
         "psi0": 0.0, "v0": v_mover, "script": mover_script},
        {"id": "leader", "x0": float(rng.uniform(22.0, 32.0)), "y0": 0.0,
         "psi0": 0.0, "v0": float(rng.uniform(9.0, 13.0)), "script": hold},
    ]
    return {"name": "lane_change", "dt": dt, "host": "host", "vehicles": vehicles}


def interacting_corpus(n_scenes: int, seed: int, t_history: int = 30,
                       t_predict: int = 50, dt: float = 0.1) -> list[Scene]:
    """Alternating braking-platoon and lane-change scenes, one recording each."""
    rng = np.random.default_rng(seed)
    t_total = (t_history + t_predict) * dt
    scenes: list[Scene] = []
    for i in range(n_scenes):
        spec = _platoon_spec(rng, t_total, dt) if i % 2 == 0 \
            else _lane_change_spec(rng, t_total, dt)
        scene = synth_scenario(spec, t_history, t_predict)
        scene.recording = f"synth-{i:04d}-{spec['name']}"
        scenes.append(scene)
    return scenes
