"""Interaction-group inference from latent vehicle features.

Cosine affinities between node features are thresholded into a binary
topology matrix; each row becomes a candidate hyperedge (the vehicle and
everything it is linked to), duplicates are merged, and the survivors are
expressed as an incidence matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def cosine_affinity(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of feature rows.

    Zero-norm rows get affinity 0 to everything else but keep a unit
    diagonal, so padded/ghost vehicles stay isolated instead of dividing
    by zero.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"expected an N x d feature matrix, got shape {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = f / safe[:, None]
    aff = unit @ unit.T
    aff = (aff + aff.T) / 2.0  # exact symmetry despite BLAS rounding
    np.clip(aff, -1.0, 1.0, out=aff)
    zero = norms == 0.0
    aff[zero, :] = 0.0
    aff[:, zero] = 0.0
    np.fill_diagonal(aff, 1.0)
    return aff


def infer_topology(affinity: np.ndarray, tau: float) -> np.ndarray:
    """Binary link matrix: entries with affinity >= tau (inclusive)."""
    if not -1.0 <= tau <= 1.0:
        raise ConfigError(f"affinity threshold {tau} outside [-1, 1]")
    aff = np.asarray(affinity, dtype=np.float64)
    return (aff >= tau).astype(np.int64)


@dataclass(frozen=True)
class HyperedgeGroups:
    """Deduplicated hyperedges plus the vertex/edge incidence structure."""
    members: tuple[tuple[int, ...], ...]   # per hyperedge, sorted vertex ids
    vertex_edges: tuple[tuple[int, ...], ...]  # per vertex, incident hyperedge ids
    incidence: np.ndarray                  # |V| x |E| binary

    @property
    def n_vertices(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_edges(self) -> int:
        return self.incidence.shape[1]


def _groups_from_member_sets(n: int, raw: list[tuple[int, ...]]) -> HyperedgeGroups:
    members: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    for ms in raw:
        if not ms:
            raise ValueError("empty hyperedges are forbidden")
        if ms not in seen:
            seen.add(ms)
            members.append(ms)
    incidence = np.zeros((n, len(members)), dtype=np.int64)
    for e, ms in enumerate(members):
        incidence[list(ms), e] = 1
    vertex_edges = tuple(tuple(np.flatnonzero(incidence[v]).tolist()) for v in range(n))
    return HyperedgeGroups(tuple(members), vertex_edges, incidence)


def groups_from_topology(topology: np.ndarray) -> HyperedgeGroups:
    """One hyperedge per vehicle: itself plus everything it links to.

    Exact-duplicate member sets are merged, keeping first occurrence order.
    """
    g = np.asarray(topology)
    n = g.shape[0]
    raw = [tuple(np.flatnonzero(g[i]).tolist()) for i in range(n)]
    return _groups_from_member_sets(n, raw)


def pairwise_groups(topology: np.ndarray) -> HyperedgeGroups:
    """Plain-graph fallback: one two-member hyperedge per linked pair.

    Vehicles with no off-diagonal links end up in no hyperedge at all.
    """
    g = np.asarray(topology)
    n = g.shape[0]
    raw = [(i, j) for i in range(n) for j in range(i + 1, n) if g[i, j]]
    return _groups_from_member_sets(n, raw)


def adjacency_from_incidence(incidence: np.ndarray) -> np.ndarray:
    """Shared-hyperedge counts: A[i, j] = number of hyperedges holding both."""
    h = np.asarray(incidence, dtype=np.int64)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D incidence matrix, got shape {h.shape}")
    if h.shape[1] and not np.all(h.sum(axis=0) > 0):
        raise ValueError("incidence matrix contains an empty hyperedge column")
    return h @ h.T


def topology_summary(affinity: np.ndarray, tau: float, topology: np.ndarray,
                     groups: HyperedgeGroups) -> dict:
    """JSON-ready dump used by the CLI scenario visualization."""
    return {
        "affinity": np.asarray(affinity).tolist(),
        "tau": tau,
        "topology": np.asarray(topology).tolist(),
        "hyperedges": [list(ms) for ms in groups.members],
    }
