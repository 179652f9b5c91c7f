"""Planar single-track vehicle model with road grade, integrated by RK4.

State is (p_x, p_y, psi, v); controls are commanded acceleration and yaw
rate. The grade angle enters only the speed equation as -g*sin(alpha).
Also provides control estimation from position histories (the datasets
carry positions only) and the host behavior models built on top of it.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GRAVITY = 9.80665  # m/s^2, standard gravity
DEFAULT_WHEELBASE = 2.7  # m

BEHAVIOR_MODES = ("last_step", "average", "self_prediction")


@dataclass(frozen=True)
class VehicleState:
    """Pose and speed of one vehicle. Speed is forward-only."""
    p_x: float
    p_y: float
    psi: float
    v: float

    def __post_init__(self):
        values = (self.p_x, self.p_y, self.psi, self.v)
        if not all(math.isfinite(x) for x in values):
            raise ValueError(f"vehicle state must be finite, got {values}")
        if self.v < 0.0:
            raise ValueError(f"negative speed {self.v} rejected; the model has no reverse")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.psi, self.v])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class ControlInput:
    """Commanded acceleration (m/s^2) and yaw rate (rad/s)."""
    a: float
    omega: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.omega)):
            raise ValueError(f"control input must be finite, got ({self.a}, {self.omega})")


ZERO_CONTROL = ControlInput(0.0, 0.0)


@dataclass(frozen=True)
class ControlLimits:
    """Saturation bounds applied to estimated controls before rollout."""
    a_max: float = 8.0
    omega_max: float = 1.0

    def clamp(self, a: float, omega: float) -> ControlInput:
        return ControlInput(
            min(max(a, -self.a_max), self.a_max),
            min(max(omega, -self.omega_max), self.omega_max),
        )


DEFAULT_LIMITS = ControlLimits()


class GradeProfile:
    """Road gradient angle as a function of time; flat by default."""

    def __init__(self, fn: Callable[[float], float] | None = None):
        self._fn = fn

    def __call__(self, t: float) -> float:
        alpha = 0.0 if self._fn is None else float(self._fn(t))
        if not abs(alpha) < math.pi / 2:
            raise ValueError(f"grade angle {alpha} outside (-pi/2, pi/2)")
        return alpha

    @staticmethod
    def flat() -> "GradeProfile":
        return GradeProfile()

    @staticmethod
    def constant(alpha: float) -> "GradeProfile":
        return GradeProfile(lambda _t: alpha)


FLAT = GradeProfile.flat()


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled state sequence; headings must be unwrapped."""
    dt: float
    states: tuple[VehicleState, ...]

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"trajectory dt must be positive, got {self.dt}")
        if len(self.states) < 1:
            raise ValueError("trajectory needs at least one state")
        psis = [s.psi for s in self.states]
        jumps = np.abs(np.diff(psis))
        if jumps.size and float(jumps.max()) > math.pi:
            raise ValueError("trajectory headings look wrapped (adjacent jump > pi)")

    def __len__(self) -> int:
        return len(self.states)

    def positions(self) -> np.ndarray:
        return np.array([[s.p_x, s.p_y] for s in self.states])

    def speeds(self) -> np.ndarray:
        return np.array([s.v for s in self.states])


def state_derivative(state: VehicleState, control: ControlInput, alpha: float = 0.0) -> np.ndarray:
    """Time derivative (dp_x, dp_y, dpsi, dv) of the single-track model."""
    return np.array([
        state.v * math.cos(state.psi),
        state.v * math.sin(state.psi),
        control.omega,
        control.a - GRAVITY * math.sin(alpha),
    ])


def steering_to_yaw_rate(v: float, delta: float, wheelbase: float = DEFAULT_WHEELBASE) -> float:
    """Yaw rate induced by a front steering angle: (v / L) * tan(delta)."""
    if wheelbase <= 0.0:
        raise ValueError(f"wheelbase must be positive, got {wheelbase}")
    if not abs(delta) < math.pi / 2:
        raise ValueError(f"steering angle {delta} outside (-pi/2, pi/2)")
    return v / wheelbase * math.tan(delta)


def _control_at(control, t: float) -> ControlInput:
    return control(t) if callable(control) else control


def rk4_step(state: VehicleState, control, grade: GradeProfile = FLAT,
             dt: float = 0.1, t: float = 0.0) -> VehicleState:
    """One classical 4th-order step over [t, t + dt].

    ``control`` is a ControlInput held constant across the step or a
    callable of time sampled at t, t + dt/2 and t + dt. A negative updated
    speed is clamped to zero (the model is invalid in reverse) and logged.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = state.as_array()
    u0 = _control_at(control, t)
    um = _control_at(control, t + dt / 2.0)
    u1 = _control_at(control, t + dt)
    a0, am, a1 = grade(t), grade(t + dt / 2.0), grade(t + dt)

    def f(arr, u, alpha):
        return state_derivative(VehicleState(arr[0], arr[1], arr[2], max(arr[3], 0.0)), u, alpha)

    k1 = f(x, u0, a0)
    k2 = f(x + dt / 2.0 * k1, um, am)
    k3 = f(x + dt / 2.0 * k2, um, am)
    k4 = f(x + dt * k3, u1, a1)
    nxt = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if nxt[3] < 0.0:
        logger.debug("speed clamped to 0 at t=%.3f (was %.4f)", t + dt, nxt[3])
        nxt[3] = 0.0
    return VehicleState.from_array(nxt)


def rollout(state: VehicleState, controls: Sequence[ControlInput], grade: GradeProfile = FLAT,
            dt: float = 0.1, n: int | None = None) -> Trajectory:
    """Integrate n steps; returns n+1 states starting at ``state``.

    Controls are piecewise constant: controls[k] is held over step k.
    """
    if n is None:
        n = len(controls)
    if len(controls) < n:
        raise ValueError(f"need {n} controls, got {len(controls)}")
    states = [state]
    for k in range(n):
        states.append(rk4_step(states[-1], controls[k], grade, dt, t=k * dt))
    return Trajectory(dt, tuple(states))


def extrapolate_beyond_horizon(state: VehicleState, control: ControlInput,
                               grade: GradeProfile = FLAT, dt: float = 0.1,
                               n: int = 0) -> Trajectory:
    """Continue from a terminal state holding its last control fixed."""
    return rollout(state, [control] * n, grade, dt, n)


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; windows truncate at the edges."""
    if window <= 1 or x.size <= 1:
        return x.copy()
    kernel = np.ones(window)
    sums = np.convolve(x, kernel, mode="same")
    counts = np.convolve(np.ones_like(x), kernel, mode="same")
    return sums / counts


def estimate_motion(xy: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame speed and unwrapped heading from positions.

    Central differences on the interior, second-order one-sided at the
    edges. Frames moving slower than 1e-9 m/s reuse the previous heading
    (atan2 of noise is meaningless at rest).
    """
    xy = np.asarray(xy, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
        raise ValueError(f"need at least 2 position rows, got shape {xy.shape}")
    edge_order = 2 if xy.shape[0] >= 3 else 1
    vx = np.gradient(xy[:, 0], dt, edge_order=edge_order)
    vy = np.gradient(xy[:, 1], dt, edge_order=edge_order)
    v = np.hypot(vx, vy)
    psi = np.zeros_like(v)
    last = 0.0
    for i in range(v.size):
        if v[i] > 1e-9:
            last = math.atan2(vy[i], vx[i])
        psi[i] = last
    return v, np.unwrap(psi)


def trajectory_from_positions(xy: np.ndarray, dt: float) -> Trajectory:
    """Lift a position track to full states via motion estimation."""
    v, psi = estimate_motion(xy, dt)
    states = tuple(
        VehicleState(float(x), float(y), float(p), max(float(s), 0.0))
        for (x, y), p, s in zip(np.asarray(xy, dtype=np.float64), psi, v)
    )
    return Trajectory(dt, states)


def estimate_controls(traj: Trajectory, limits: ControlLimits | None = None,
                      smooth_window: int = 5) -> list[ControlInput]:
    """Per-frame (a, omega) recovered from positions by finite differences.

    Acceleration and yaw rate are smoothed with a centered moving average.
    A degenerate track (all points identical) yields zero controls and a
    warning. Pass ``limits`` to saturate noisy estimates.
    """
    if len(traj) < 3:
        raise ValueError(f"control estimation needs >= 3 frames, got {len(traj)}")
    xy = traj.positions()
    if np.allclose(xy, xy[0], atol=1e-12):
        logger.warning("degenerate trajectory (all points identical); returning zero controls")
        return [ZERO_CONTROL] * len(traj)
    v, psi = estimate_motion(xy, traj.dt)
    a = _moving_average(np.gradient(v, traj.dt, edge_order=2), smooth_window)
    omega = _moving_average(np.gradient(psi, traj.dt, edge_order=2), smooth_window)
    if limits is None:
        return [ControlInput(float(ai), float(wi)) for ai, wi in zip(a, omega)]
    return [limits.clamp(float(ai), float(wi)) for ai, wi in zip(a, omega)]


def behavior_controls(history: Trajectory, mode: str, n: int,
                      limits: ControlLimits = DEFAULT_LIMITS) -> list[ControlInput]:
    """Future control sequence for the host under one behavior model.

    last_step holds the final estimated control; average holds the history
    mean; self_prediction replans each step by re-estimating controls over
    the trailing window of observed plus generated motion.
    """
    if mode not in BEHAVIOR_MODES:
        raise ValueError(f"unknown behavior mode {mode!r}; expected one of {BEHAVIOR_MODES}")
    if len(history) < 3:
        raise ValueError(f"behavior models need >= 3 history frames, got {len(history)}")
    if mode == "last_step":
        return [estimate_controls(history, limits)[-1]] * n
    if mode == "average":
        est = estimate_controls(history, limits)
        a = float(np.mean([u.a for u in est]))
        omega = float(np.mean([u.omega for u in est]))
        return [limits.clamp(a, omega)] * n
    window = len(history)
    states = list(history.states)
    out: list[ControlInput] = []
    for k in range(n):
        recent = Trajectory(history.dt, tuple(states[-window:]))
        u = estimate_controls(recent, limits)[-1]
        out.append(u)
        states.append(rk4_step(states[-1], u, FLAT, history.dt, t=k * history.dt))
    return out
