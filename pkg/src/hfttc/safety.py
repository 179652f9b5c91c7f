"""Stochastic time-to-collision analysis over predicted mode sets.

A collision is flagged at the first sampled instant where both the
longitudinal and lateral separations fall inside their thresholds. Each
predicted mode contributes its crossing time with its probability,
yielding a discrete distribution; modes that never cross accumulate into
an explicit no-event mass. Tracks shorter than the search horizon are
extended by holding their terminal estimated control constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    DEFAULT_LIMITS,
    FLAT,
    BEHAVIOR_MODES,
    ControlLimits,
    Trajectory,
    estimate_controls,
    extrapolate_beyond_horizon,
    trajectory_from_positions,
)
from .errors import ConfigError
from .model import ModeSet, PredictorConfig, make_host_hypothesis, run_forward


@dataclass(frozen=True)
class SafetyThresholds:
    """Collision gates (meters) and the sampled search grid (seconds)."""
    r_x: float = 5.0
    r_y: float = 2.0
    horizon: float = 10.0
    dt: float = 0.1

    def __post_init__(self):
        if min(self.r_x, self.r_y, self.horizon, self.dt) <= 0:
            raise ConfigError("safety thresholds and grid must be positive")
        if self.horizon < self.dt:
            raise ConfigError(f"horizon {self.horizon} shorter than one step {self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class TtcDistribution:
    """Discrete atoms (value, probability) plus the mass of no collision."""
    atoms: tuple[tuple[float, float], ...]
    no_event_mass: float
    max_value: float | None = None  # upper bound for the time variant

    def __post_init__(self):
        total = sum(p for _, p in self.atoms) + self.no_event_mass
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"distribution mass {total} != 1")
        if any(p <= 0.0 for _, p in self.atoms) or self.no_event_mass < -1e-12:
            raise ValueError("atom probabilities must be positive")
        values = [v for v, _ in self.atoms]
        if values != sorted(values):
            raise ValueError("atoms must be sorted by value")
        if any(v <= 0.0 for v in values):
            raise ValueError("atom values must be positive")
        if self.max_value is not None and any(v > self.max_value + 1e-12 for v in values):
            raise ValueError(f"atom beyond upper bound {self.max_value}")

    def cdf(self, t: float) -> float:
        return sum(p for v, p in self.atoms if v <= t)

    @property
    def event_mass(self) -> float:
        return sum(p for _, p in self.atoms)


def _pad_stationary(xy: np.ndarray, rows: int) -> np.ndarray:
    return np.vstack([xy, np.tile(xy[-1], (rows, 1))])


def _grid_positions(xy: np.ndarray, dt: float, n_frames: int,
                    limits: ControlLimits = DEFAULT_LIMITS) -> np.ndarray:
    """Positions on the grid t0 + k*dt for k = 0..n_frames.

    Short tracks are extended by a constant-control rollout from their
    estimated terminal state; near-stationary tracks are simply held.
    """
    xy = np.asarray(xy, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 1:
        raise ValueError(f"expected a (k, 2) track, got shape {xy.shape}")
    missing = n_frames + 1 - xy.shape[0]
    if missing <= 0:
        return xy[:n_frames + 1]
    if xy.shape[0] == 1 or np.allclose(xy, xy[-1], atol=1e-12):
        return _pad_stationary(xy, missing)
    if xy.shape[0] == 2:
        vel = (xy[1] - xy[0]) / dt
        tail = xy[-1] + np.arange(1, missing + 1)[:, None] * dt * vel
        return np.vstack([xy, tail])
    traj = trajectory_from_positions(xy, dt)
    last_control = estimate_controls(traj, limits)[-1]
    tail = extrapolate_beyond_horizon(traj.states[-1], last_control, FLAT, dt, missing)
    return np.vstack([xy, tail.positions()[1:]])


def hf_ttc_mode(host: Trajectory, ambient: Trajectory, thr: SafetyThresholds,
                limits: ControlLimits = DEFAULT_LIMITS) -> float | None:
    """First sampled time (after t0) inside both gates, as a duration.

    Both trajectories must share the thresholds' clock; each is extended
    to the search horizon if shorter. None means no crossing was found.
    """
    for traj in (host, ambient):
        if abs(traj.dt - thr.dt) > 1e-9:
            raise ValueError(f"trajectory dt {traj.dt} does not match search grid {thr.dt}")
    n = thr.n_steps
    host_xy = _grid_positions(host.positions(), thr.dt, n, limits)
    amb_xy = _grid_positions(ambient.positions(), thr.dt, n, limits)
    gap = np.abs(host_xy - amb_xy)
    hit = (gap[1:, 0] <= thr.r_x) & (gap[1:, 1] <= thr.r_y)
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return None
    return float((idx[0] + 1) * thr.dt)


def ttc_distribution(host: Trajectory, modes: ModeSet, ambient_anchor: np.ndarray,
                     thr: SafetyThresholds, limits: ControlLimits = DEFAULT_LIMITS,
                     ) -> tuple[TtcDistribution, TtcDistribution]:
    """Collision-time and inverse-collision-rate distributions for one pair.

    Mode trajectories start one frame after t0; ``ambient_anchor`` is the
    vehicle's last observed position, prepended to align the clocks. Atoms
    landing on the same grid step merge by summing probability.
    """
    if abs(modes.probabilities.sum() - 1.0) > 1e-9:
        raise ValueError("mode probabilities are not a simplex")
    by_step: dict[int, float] = {}
    no_event = 0.0
    for m in range(modes.n_modes):
        track = np.vstack([np.asarray(ambient_anchor, dtype=np.float64)[None, :],
                           modes.trajectories[m]])
        ambient = trajectory_from_positions(track, thr.dt)
        ttc = hf_ttc_mode(host, ambient, thr, limits)
        p = float(modes.probabilities[m])
        if ttc is None:
            no_event += p
        else:
            k = int(round(ttc / thr.dt))
            by_step[k] = by_step.get(k, 0.0) + p
    ttc_atoms = tuple((k * thr.dt, p) for k, p in sorted(by_step.items()))
    ittc_atoms = tuple(sorted(((1.0 / t, p) for t, p in ttc_atoms), key=lambda a: a[0]))
    return (
        TtcDistribution(ttc_atoms, no_event, max_value=thr.horizon),
        TtcDistribution(ittc_atoms, no_event),
    )


def traditional_ttc(host_track: np.ndarray, ambient_track: np.ndarray,
                    thr: SafetyThresholds) -> float | None:
    """Crossing time when both vehicles hold their last planar velocity.

    Velocities come from the last two observed frames; the same sampled
    dual-gate search is applied.
    """
    n = thr.n_steps
    tracks = []
    for track in (host_track, ambient_track):
        xy = np.asarray(track, dtype=np.float64)
        if xy.ndim != 2 or xy.shape[0] < 2:
            raise ValueError(f"need at least two frames to derive a velocity, got {xy.shape}")
        vel = (xy[-1] - xy[-2]) / thr.dt
        steps = np.arange(n + 1)[:, None] * thr.dt
        tracks.append(xy[-1] + steps * vel)
    gap = np.abs(tracks[0] - tracks[1])
    hit = (gap[1:, 0] <= thr.r_x) & (gap[1:, 1] <= thr.r_y)
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return None
    return float((idx[0] + 1) * thr.dt)


def cdf_series(dist: TtcDistribution, thr: SafetyThresholds) -> tuple[np.ndarray, np.ndarray]:
    """CDF sampled on the search grid, for plotting and CSV export."""
    times = np.arange(thr.n_steps + 1) * thr.dt
    return times, np.array([dist.cdf(t) for t in times])


@dataclass(frozen=True)
class PairRisk:
    """Risk summary for one host-ambient pair under one behavior model."""
    host_id: str
    ambient_id: str
    behavior: str
    ttc: TtcDistribution
    ittc: TtcDistribution
    traditional: float | None

    def to_dict(self) -> dict:
        return {
            "pair": [self.host_id, self.ambient_id],
            "behavior": self.behavior,
            "ttc_atoms": [[t, p] for t, p in self.ttc.atoms],
            "no_event_mass": self.ttc.no_event_mass,
            "ittc_atoms": [[v, p] for v, p in self.ittc.atoms],
            "traditional_ttc": self.traditional,
        }


def scenario_risk(scene, params, cfg: PredictorConfig, thr: SafetyThresholds,
                  behaviors=BEHAVIOR_MODES, limits: ControlLimits = DEFAULT_LIMITS,
                  ) -> list[PairRisk]:
    """Full risk fan-out: every behavior hypothesis against every neighbor."""
    if thr.horizon < cfg.t_predict * thr.dt:
        raise ConfigError(f"search horizon {thr.horizon}s shorter than the "
                          f"prediction window {cfg.t_predict * thr.dt}s")
    if abs(scene.dt - thr.dt) > 1e-9:
        raise ConfigError(f"scene dt {scene.dt} does not match search grid {thr.dt}")
    n_ambient = scene.history.shape[0] - 1
    if n_ambient == 0:
        return []
    traditional = {
        v: traditional_ttc(scene.history[0], scene.history[v + 1], thr)
        for v in range(n_ambient)
    }
    out: list[PairRisk] = []
    for behavior in behaviors:
        hyp = make_host_hypothesis(scene, behavior, cfg, limits)
        host_traj = trajectory_from_positions(
            np.vstack([scene.history[0, -1][None, :], hyp.trajectory]), scene.dt)
        fp = run_forward(scene.history, params, cfg, "eval", hypothesis=hyp)
        for v, mode_set in enumerate(fp.mode_sets):
            ttc, ittc = ttc_distribution(host_traj, mode_set, scene.history[v + 1, -1], thr, limits)
            out.append(PairRisk(str(scene.host_id), str(scene.ambient_ids[v]),
                                behavior, ttc, ittc, traditional[v]))
    return out
