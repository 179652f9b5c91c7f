"""Training loop, best-of-M loss, displacement metrics, and evaluation.

Training teacher-forces the host embedding with the ground-truth host
future; evaluation swaps in behavior-model rollouts and scores the best
mode per vehicle. A constant-velocity extrapolation baseline is computed
alongside for comparison.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .dynamics import BEHAVIOR_MODES
from .errors import ConfigError, DataError, DivergenceError
from .model import (
    ForwardPass,
    ModeSet,
    PredictorConfig,
    constant_velocity_future,
    make_host_hypothesis,
    run_forward,
)

logger = logging.getLogger(__name__)

DEFAULT_HORIZONS = (10, 20, 30, 40, 50)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs; lr = 0 degenerates to a warned no-op."""
    lambda_weight: float = 1.0
    lr: float = 1e-3
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    aux_mode_ce: bool = False

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_weight}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch size >= 1")
        if self.lr == 0:
            logger.warning("learning rate is 0; parameters will not change")


def mode_errors(future: np.ndarray, trajectories: np.ndarray) -> np.ndarray:
    """Summed squared deviation per mode."""
    if trajectories.ndim != 3 or trajectories.shape[0] < 1:
        raise ValueError("need at least one mode trajectory")
    diff = trajectories - future[None, :, :]
    return (diff ** 2).sum(axis=(1, 2))


def loss_value(future: np.ndarray, modes: ModeSet, lambda_weight: float = 1.0) -> float:
    """Best-of-M squared error plus lambda times the mean over modes."""
    errs = mode_errors(future, modes.trajectories)
    return float(errs.min() + lambda_weight * errs.mean())


def select_best_mode(future: np.ndarray, trajectories: np.ndarray) -> int:
    """Index of the mode with the smallest cumulative Euclidean error.

    Ties resolve to the lowest index.
    """
    if trajectories.shape[0] < 1:
        raise ValueError("need at least one mode trajectory")
    dists = np.linalg.norm(trajectories - future[None, :, :], axis=2).sum(axis=1)
    return int(np.argmin(dists))


def scene_loss(fp: ForwardPass, future: np.ndarray, lambda_weight: float,
               aux_mode_ce: bool = False) -> tuple[nm.Tensor, float, float]:
    """Graph-valued loss for one scene, averaged over ambient vehicles.

    The best mode is chosen on squared error (lowest index wins ties) and
    gradients flow through that branch plus the lambda-weighted average.
    Returns (loss node, best-of-M term value, average term value).
    """
    if not fp.traj_nodes:
        raise ValueError("scene has no ambient vehicles to score")
    n_modes = len(fp.traj_nodes[0])
    total: nm.Tensor | None = None
    best_acc = 0.0
    avg_acc = 0.0
    for v, traj_modes in enumerate(fp.traj_nodes):
        target = nm.constant(future[v + 1].reshape(1, -1))
        errs = [nm.squared_error(t, target) for t in traj_modes]
        values = np.array([e.item() for e in errs])
        best = int(np.argmin(values))
        summed = errs[0]
        for e in errs[1:]:
            summed = summed + e
        vehicle = errs[best] + summed * (lambda_weight / n_modes)
        if aux_mode_ce:
            p_best = nm.slice_cols(nm.slice_rows(fp.prob_node, v, v + 1), best, best + 1)
            vehicle = vehicle + nm.sum_all(nm.log(p_best)) * -1.0
        total = vehicle if total is None else total + vehicle
        best_acc += float(values[best])
        avg_acc += float(values.mean())
    n = len(fp.traj_nodes)
    return total * (1.0 / n), best_acc / n, avg_acc / n


@dataclass(frozen=True)
class MetricsReport:
    """Displacement errors in meters over the prediction horizon."""
    ade: float
    fde: float
    mae: float
    rmse: float
    rmse_by_horizon: dict[int, float] = field(default_factory=dict)
    n_vehicles: int = 0

    def to_dict(self) -> dict:
        return {
            "ade": self.ade, "fde": self.fde, "mae": self.mae, "rmse": self.rmse,
            "rmse_by_horizon": {str(k): v for k, v in sorted(self.rmse_by_horizon.items())},
            "n_vehicles": self.n_vehicles,
        }


def compute_metrics(truths: np.ndarray, preds: np.ndarray,
                    horizons: tuple[int, ...] = DEFAULT_HORIZONS) -> MetricsReport:
    """ADE/FDE (Euclidean), MAE (L1) and RMSE over vehicles and frames.

    The horizon table holds the RMSE of the position error at specific
    future frames (1-indexed), for horizons within the prediction window.
    """
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truths.shape != preds.shape or truths.ndim != 3 or truths.shape[0] == 0:
        raise ValueError(f"prediction/truth shapes disagree or are empty: "
                         f"{preds.shape} vs {truths.shape}")
    diff = preds - truths
    l2 = np.linalg.norm(diff, axis=2)
    l1 = np.abs(diff).sum(axis=2)
    table = {h: float(np.sqrt((l2[:, h - 1] ** 2).mean()))
             for h in horizons if h <= truths.shape[1]}
    return MetricsReport(
        ade=float(l2.mean()),
        fde=float(l2[:, -1].mean()),
        mae=float(l1.mean()),
        rmse=float(np.sqrt((l2 ** 2).mean())),
        rmse_by_horizon=table,
        n_vehicles=truths.shape[0],
    )


class Adam:
    """Adaptive-moment descent (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, store: nm.ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        for name, tensor in self.store.items():
            g = grads[name]
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    params: nm.ParameterStore
    curve: list[tuple[int, float, float, float, float]]  # step, loss, best, avg, wall_ms


def train(scenes, params: nm.ParameterStore, cfg: PredictorConfig,
          train_cfg: TrainConfig) -> TrainResult:
    """Deterministic mini-batch descent on the combined trajectory loss."""
    usable = [s for s in scenes if s.history.shape[0] > 1]
    if not usable:
        raise DataError("training set has no scenes with ambient vehicles")
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = Adam(params, train_cfg.lr)
    order: list[int] = []
    curve: list[tuple[int, float, float, float, float]] = []
    for step in range(train_cfg.steps):
        started = time.perf_counter()
        while len(order) < train_cfg.batch_size:
            order.extend(rng.permutation(len(usable)).tolist())
        batch, order = order[:train_cfg.batch_size], order[train_cfg.batch_size:]
        total: nm.Tensor | None = None
        best_terms = avg_terms = 0.0
        try:
            for idx in batch:
                scene = usable[idx]
                fp = run_forward(scene.history, params, cfg, "train",
                                 host_future=scene.future[0])
                node, best, avg = scene_loss(fp, scene.future, train_cfg.lambda_weight,
                                             train_cfg.aux_mode_ce)
                total = node if total is None else total + node
                best_terms += best
                avg_terms += avg
            total = total * (1.0 / len(batch))
            value = total.item()
            if not np.isfinite(value):
                raise ValueError("loss is not finite")
            grads = nm.gradients(total, params)
        except ValueError as exc:
            # the engine rejects non-finite values as soon as they appear
            raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
        optimizer.step(grads)
        wall_ms = (time.perf_counter() - started) * 1e3
        curve.append((step, value, best_terms / len(batch), avg_terms / len(batch), wall_ms))
    return TrainResult(params, curve)


def write_train_log(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "best_of_M_term", "average_term", "wall_ms"])
        for step, loss, best, avg, wall in curve:
            writer.writerow([step, repr(loss), repr(best), repr(avg), f"{wall:.3f}"])


def best_mode_predictions(scenes, params: nm.ParameterStore, cfg: PredictorConfig,
                          behavior: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (truth, prediction) pairs for every ambient vehicle."""
    truths, preds = [], []
    for scene in scenes:
        if scene.history.shape[0] <= 1:
            continue
        hyp = make_host_hypothesis(scene, behavior, cfg)
        fp = run_forward(scene.history, params, cfg, "eval", hypothesis=hyp)
        for v, mode_set in enumerate(fp.mode_sets):
            truth = scene.future[v + 1]
            best = select_best_mode(truth, mode_set.trajectories)
            truths.append(truth)
            preds.append(mode_set.trajectories[best])
    if not truths:
        raise DataError("no ambient vehicles to evaluate")
    return np.stack(truths), np.stack(preds)


def evaluate(scenes, params: nm.ParameterStore, cfg: PredictorConfig,
             behavior: str) -> MetricsReport:
    truths, preds = best_mode_predictions(scenes, params, cfg, behavior)
    return compute_metrics(truths, preds)


def constant_velocity_metrics(scenes, t_predict: int) -> MetricsReport:
    """Baseline: every ambient vehicle continues at its last-frame velocity."""
    truths, preds = [], []
    for scene in scenes:
        for v in range(1, scene.history.shape[0]):
            truths.append(scene.future[v])
            preds.append(constant_velocity_future(scene.history[v], scene.dt, t_predict))
    if not truths:
        raise DataError("no ambient vehicles to evaluate")
    return compute_metrics(np.stack(truths), np.stack(preds))


def evaluate_suite(scenes, params: nm.ParameterStore, cfg: PredictorConfig,
                   behaviors=BEHAVIOR_MODES) -> dict[str, MetricsReport]:
    """Metrics per behavior hypothesis plus the constant-velocity baseline."""
    out = {behavior: evaluate(scenes, params, cfg, behavior) for behavior in behaviors}
    out["constant_velocity"] = constant_velocity_metrics(scenes, cfg.t_predict)
    return out
