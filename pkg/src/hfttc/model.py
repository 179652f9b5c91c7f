"""Probabilistic multi-vehicle trajectory predictor.

Vehicle histories are embedded into latent node features, an interaction
topology is inferred from their cosine affinities, and stacked transformer
layers update node and hyperedge features jointly. Attention is restricted
to topology-linked vehicles. Multiple decoder heads turn the final
embeddings (together with the initial embedding and a host-trajectory
embedding) into candidate futures with softmax confidences.

The host future fed to the embedding differs by phase: training uses the
ground-truth future (teacher forcing), evaluation uses a candidate rolled
out from a behavior model through the dynamics module.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import numerics as nm
from .dynamics import (
    DEFAULT_LIMITS,
    FLAT,
    ControlLimits,
    behavior_controls,
    rollout,
    trajectory_from_positions,
)
from .errors import ConfigError
from .hypergraph import (
    HyperedgeGroups,
    cosine_affinity,
    groups_from_topology,
    infer_topology,
    pairwise_groups,
)

PHASES = ("train", "eval")


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture and inference knobs; node and edge widths are equal."""
    node_dim: int = 64
    n_layers: int = 2
    ffn_mult: int = 4
    n_modes: int = 5
    tau: float = 0.5
    t_history: int = 30
    t_predict: int = 50
    gnn_ablation: bool = False
    kinematic_host: bool = False

    def __post_init__(self):
        if self.n_modes < 1:
            raise ConfigError(f"need at least one decoder head, got {self.n_modes}")
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigError(f"affinity threshold {self.tau} outside [-1, 1]")
        if min(self.node_dim, self.n_layers, self.ffn_mult) < 1:
            raise ConfigError("node_dim, n_layers and ffn_mult must be positive")
        if self.t_history < 3 or self.t_predict < 1:
            raise ConfigError(f"invalid window lengths ({self.t_history}, {self.t_predict})")

    @property
    def edge_dim(self) -> int:
        return self.node_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "PredictorConfig":
        known = {f.name for f in fields(PredictorConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown predictor config keys: {sorted(unknown)}")
        return PredictorConfig(**d)


@dataclass(frozen=True)
class HostHypothesis:
    """Candidate host future (positions for frames t0+1 .. t0+T_p)."""
    behavior: str
    trajectory: np.ndarray


@dataclass(frozen=True)
class ModeSet:
    """Candidate futures and confidences for one ambient vehicle."""
    trajectories: np.ndarray   # (M, T_p, 2)
    probabilities: np.ndarray  # (M,), positive, sums to 1

    def __post_init__(self):
        if self.probabilities.ndim != 1 or self.trajectories.shape[0] != self.probabilities.size:
            raise ValueError("mode count mismatch between trajectories and probabilities")
        if abs(self.probabilities.sum() - 1.0) > 1e-9 or np.any(self.probabilities <= 0.0):
            raise ValueError("mode probabilities must be positive and sum to 1")

    @property
    def n_modes(self) -> int:
        return self.probabilities.size


@dataclass
class ForwardPass:
    """Graph handles plus extracted values for one scene."""
    mode_sets: list[ModeSet]
    traj_nodes: list[list[nm.Tensor]]   # [ambient][mode] -> (1, 2*T_p)
    prob_node: nm.Tensor | None         # (N_ambient, M)
    attention: list[np.ndarray]
    affinity: np.ndarray
    topology: np.ndarray
    groups: HyperedgeGroups


def init_params(cfg: PredictorConfig, seed: int) -> nm.ParameterStore:
    """Seeded uniform(+-sqrt(1/fan_in)) weights; norms start as identity."""
    rng = np.random.default_rng(seed)
    store = nm.ParameterStore()

    def uniform(name, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        store.add(name, rng.uniform(-bound, bound, size=shape))

    def mlp(prefix, in_dim, hidden, out_dim):
        uniform(f"{prefix}.w1", (in_dim, hidden), in_dim)
        uniform(f"{prefix}.b1", (hidden,), in_dim)
        uniform(f"{prefix}.w2", (hidden, out_dim), hidden)
        uniform(f"{prefix}.b2", (out_dim,), hidden)

    d = cfg.node_dim
    mlp("encoder", 2 * cfg.t_history, d, d)
    mlp("host", 2 * cfg.t_predict, d, d)
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        for name in ("query", "key", "value"):
            uniform(f"{p}.{name}_node", (d, d), d)
            uniform(f"{p}.{name}_edge", (d, d), d)
        mlp(f"{p}.ffn", d, cfg.ffn_mult * d, d)
        store.add(f"{p}.node_norm_gain", np.ones(d))
        store.add(f"{p}.node_norm_bias", np.zeros(d))
        uniform(f"{p}.message_w", (2 * d, d), 2 * d)
        uniform(f"{p}.edge_w", (d, d), d)
        uniform(f"{p}.edge_b", (d,), d)
        store.add(f"{p}.edge_norm_gain", np.ones(d))
        store.add(f"{p}.edge_norm_bias", np.zeros(d))
    for m in range(cfg.n_modes):
        mlp(f"head{m}", 3 * d, d, 2 * cfg.t_predict + 1)
    return store


def _mlp2(x: nm.Tensor, params: nm.ParameterStore, prefix: str) -> nm.Tensor:
    hidden = nm.relu(nm.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return nm.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def embed_history(histories: np.ndarray, params: nm.ParameterStore,
                  cfg: PredictorConfig) -> nm.Tensor:
    """Per-vehicle latent features from the flattened history window."""
    h = np.asarray(histories, dtype=np.float64)
    if h.ndim != 3 or h.shape[1] != cfg.t_history or h.shape[2] != 2:
        raise ValueError(f"expected histories of shape (N, {cfg.t_history}, 2), got {h.shape}")
    return _mlp2(nm.constant(h.reshape(h.shape[0], -1)), params, "encoder")


def embed_host(future_xy: np.ndarray, params: nm.ParameterStore,
               cfg: PredictorConfig, phase: str) -> nm.Tensor:
    """Embed a host future; the phase only labels its provenance."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    f = np.asarray(future_xy, dtype=np.float64)
    if f.shape != (cfg.t_predict, 2):
        raise ValueError(f"expected a ({cfg.t_predict}, 2) host future, got {f.shape}")
    return _mlp2(nm.constant(f.reshape(1, -1)), params, "host")


def _member_mean_matrix(groups: HyperedgeGroups) -> np.ndarray:
    """(E, N): row e averages the member vertices of hyperedge e."""
    b = groups.incidence.T.astype(np.float64)
    sizes = b.sum(axis=1, keepdims=True)
    return b / sizes if b.size else b


def _incident_mean_matrix(groups: HyperedgeGroups) -> np.ndarray:
    """(N, E): row i averages the hyperedges incident to vertex i."""
    p = groups.incidence.astype(np.float64)
    deg = p.sum(axis=1, keepdims=True)
    np.divide(p, deg, out=p, where=deg > 0)
    return p


def init_edge_features(node_feats: nm.Tensor, groups: HyperedgeGroups) -> nm.Tensor:
    """Hyperedge features start as the mean of their member node features."""
    return nm.matmul(nm.constant(_member_mean_matrix(groups)), node_feats)


def transformer_layer(node_feats: nm.Tensor, edge_feats: nm.Tensor,
                      groups: HyperedgeGroups, topology: np.ndarray,
                      params: nm.ParameterStore, prefix: str,
                      cfg: PredictorConfig) -> tuple[nm.Tensor, nm.Tensor, np.ndarray]:
    """One joint node/hyperedge update; attention masked by the topology.

    Queries, keys and values mix a node projection with the mean of the
    incident hyperedges' projections; vertices with no incident hyperedge
    contribute a zero hyperedge term.
    """
    has_edges = edge_feats.shape[0] > 0
    if has_edges:
        incident = nm.constant(_incident_mean_matrix(groups))

    def qkv(name):
        out = nm.matmul(node_feats, params[f"{prefix}.{name}_node"])
        if has_edges:
            out = out + nm.matmul(nm.matmul(incident, edge_feats),
                                  params[f"{prefix}.{name}_edge"])
        return out

    q, k, v = qkv("query"), qkv("key"), qkv("value")
    scores = nm.matmul(q, nm.transpose(k)) * (1.0 / math.sqrt(cfg.node_dim))
    attn = nm.softmax(scores, mask=topology.astype(bool))
    mixed = nm.matmul(attn, v)
    new_nodes = nm.layer_norm(node_feats + _mlp2(mixed, params, f"{prefix}.ffn"),
                              params[f"{prefix}.node_norm_gain"],
                              params[f"{prefix}.node_norm_bias"])
    if has_edges:
        member_means = nm.matmul(nm.constant(_member_mean_matrix(groups)), new_nodes)
        message = nm.relu(nm.matmul(nm.concat([edge_feats, member_means], axis=1),
                                    params[f"{prefix}.message_w"]))
        new_edges = nm.layer_norm(
            edge_feats + nm.linear(message, params[f"{prefix}.edge_w"], params[f"{prefix}.edge_b"]),
            params[f"{prefix}.edge_norm_gain"], params[f"{prefix}.edge_norm_bias"])
    else:
        new_edges = edge_feats
    return new_nodes, new_edges, attn.data.copy()


def _offset_cumsum_matrix(t_predict: int) -> np.ndarray:
    """Right-multiplier turning per-frame (x, y) offsets into positions."""
    m = np.zeros((2 * t_predict, 2 * t_predict))
    for t1 in range(t_predict):
        for t2 in range(t1, t_predict):
            m[2 * t1, 2 * t2] = 1.0
            m[2 * t1 + 1, 2 * t2 + 1] = 1.0
    return m


def decode_modes(final_nodes: nm.Tensor, initial_nodes: nm.Tensor,
                 host_embedding: nm.Tensor, anchors: np.ndarray,
                 params: nm.ParameterStore, cfg: PredictorConfig
                 ) -> tuple[list[list[nm.Tensor]], nm.Tensor]:
    """Decode every row into M trajectories plus softmax confidences.

    Each head emits per-frame displacement offsets that are accumulated
    from the row's anchor (its last observed position) plus one logit.
    """
    n_rows = final_nodes.shape[0]
    if n_rows == 0:
        raise ValueError("decode_modes needs at least one row")
    tiled = nm.matmul(nm.constant(np.ones((n_rows, 1))), host_embedding)
    dec_in = nm.concat([final_nodes, initial_nodes, tiled], axis=1)
    anchor_tile = nm.constant(np.tile(np.asarray(anchors, dtype=np.float64), (1, cfg.t_predict)))
    cumsum = nm.constant(_offset_cumsum_matrix(cfg.t_predict))
    logit_cols, flat_trajs = [], []
    for m in range(cfg.n_modes):
        out = _mlp2(dec_in, params, f"head{m}")
        offsets = nm.slice_cols(out, 0, 2 * cfg.t_predict)
        flat_trajs.append(nm.matmul(offsets, cumsum) + anchor_tile)
        logit_cols.append(nm.slice_cols(out, 2 * cfg.t_predict, 2 * cfg.t_predict + 1))
    probs = nm.softmax(nm.concat(logit_cols, axis=1))
    traj_nodes = [[nm.slice_rows(flat_trajs[m], v, v + 1) for m in range(cfg.n_modes)]
                  for v in range(n_rows)]
    return traj_nodes, probs


def run_forward(history: np.ndarray, params: nm.ParameterStore, cfg: PredictorConfig,
                phase: str, host_future: np.ndarray | None = None,
                hypothesis: HostHypothesis | None = None) -> ForwardPass:
    """Full pass over one scene; vehicle 0 is the host, the rest ambient.

    Training must supply the ground-truth host future; evaluation must
    supply a rolled-out hypothesis instead. Mixing them up is an error.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if phase == "train":
        if host_future is None or hypothesis is not None:
            raise ValueError("training phase takes the ground-truth host future, not a hypothesis")
        future = host_future
    else:
        if hypothesis is None or host_future is not None:
            raise ValueError("evaluation phase takes a host hypothesis, not the ground truth")
        future = hypothesis.trajectory

    node_feats = embed_history(history, params, cfg)
    affinity = cosine_affinity(node_feats.data)
    topology = infer_topology(affinity, cfg.tau)
    groups = pairwise_groups(topology) if cfg.gnn_ablation else groups_from_topology(topology)
    edge_feats = init_edge_features(node_feats, groups)
    initial_nodes = node_feats
    attention: list[np.ndarray] = []
    for i in range(cfg.n_layers):
        node_feats, edge_feats, attn = transformer_layer(
            node_feats, edge_feats, groups, topology, params, f"layer{i}", cfg)
        attention.append(attn)
    host_emb = embed_host(future, params, cfg, phase)

    n = history.shape[0]
    if n <= 1:
        return ForwardPass([], [], None, attention, affinity, topology, groups)
    anchors = np.asarray(history, dtype=np.float64)[1:, -1, :]
    traj_nodes, prob_node = decode_modes(
        nm.slice_rows(node_feats, 1, n), nm.slice_rows(initial_nodes, 1, n),
        host_emb, anchors, params, cfg)
    mode_sets = [
        ModeSet(
            trajectories=np.stack([traj_nodes[v][m].data.reshape(cfg.t_predict, 2)
                                   for m in range(cfg.n_modes)]),
            probabilities=prob_node.data[v].copy(),
        )
        for v in range(n - 1)
    ]
    return ForwardPass(mode_sets, traj_nodes, prob_node, attention, affinity, topology, groups)


def predict(scene, params: nm.ParameterStore, cfg: PredictorConfig,
            phase: str = "eval", hypothesis: HostHypothesis | None = None) -> list[ModeSet]:
    """Mode sets for every ambient vehicle of a windowed scene."""
    host_future = scene.future[0] if phase == "train" else None
    return run_forward(scene.history, params, cfg, phase,
                       host_future=host_future, hypothesis=hypothesis).mode_sets


def constant_velocity_future(history_xy: np.ndarray, dt: float, n_frames: int) -> np.ndarray:
    """Straight-line continuation at the velocity of the last two frames."""
    xy = np.asarray(history_xy, dtype=np.float64)
    if xy.shape[0] < 2:
        raise ValueError("constant-velocity extrapolation needs two frames")
    vel = (xy[-1] - xy[-2]) / dt
    steps = np.arange(1, n_frames + 1)[:, None] * dt
    return xy[-1] + steps * vel


def make_host_hypothesis(scene, behavior: str, cfg: PredictorConfig,
                         limits: ControlLimits = DEFAULT_LIMITS) -> HostHypothesis:
    """Roll the host forward under one behavior model.

    Under the kinematic ablation the dynamics rollout is replaced by a
    constant-velocity, constant-heading continuation.
    """
    host_xy = scene.history[0]
    if cfg.kinematic_host:
        return HostHypothesis(behavior, constant_velocity_future(host_xy, scene.dt, cfg.t_predict))
    traj = trajectory_from_positions(host_xy, scene.dt)
    controls = behavior_controls(traj, behavior, cfg.t_predict, limits)
    rolled = rollout(traj.states[-1], controls, FLAT, scene.dt)
    return HostHypothesis(behavior, rolled.positions()[1:])


MODEL_FORMAT = "hfttc-model-v1"


def _sidecar_path(path) -> str:
    return f"{path}.meta.json"


def save_model(params: nm.ParameterStore, cfg: PredictorConfig, path) -> None:
    nm.save_params(params, path)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump({"format": MODEL_FORMAT, "config": cfg.to_dict()}, fh, sort_keys=True, indent=2)


def load_model(path, overrides: dict | None = None) -> tuple[nm.ParameterStore, PredictorConfig]:
    """Load a checkpoint; explicit overrides must agree with the sidecar.

    Ablation flags are eval-time switches and may differ; every numeric
    hyperparameter must match what the checkpoint was trained with.
    """
    with open(_sidecar_path(path), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != MODEL_FORMAT:
        raise ConfigError(f"unsupported model sidecar format: {meta.get('format')!r}")
    cfg = PredictorConfig.from_dict(meta["config"])
    if overrides:
        switchable = {"gnn_ablation", "kinematic_host"}
        for key, value in overrides.items():
            if key in switchable:
                cfg = replace(cfg, **{key: value})
            elif getattr(cfg, key) != value:
                raise ConfigError(
                    f"checkpoint sidecar has {key}={getattr(cfg, key)!r} but {value!r} was requested")
    params = init_params(cfg, seed=0)
    params.load_arrays(nm.load_params(path))
    return params, cfg
