"""Weighted undirected graphs, Laplacians and the spectral constants used by
the certification step.

Graphs are small (a few hundred nodes at most), so everything here is dense
numpy and eigenvalues come from :func:`numpy.linalg.eigvalsh`.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

# eigenvalues below ZERO_RTOL * ||L|| count as zero
ZERO_RTOL = 1e-9


class GraphError(ValueError):
    """Raised for malformed graphs or dimension mismatches."""


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph stored as a symmetric, zero-diagonal weight matrix."""

    weights: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
            raise GraphError(f"weights must be a non-empty square matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise GraphError("weights must be finite")
        if np.any(W < 0):
            raise GraphError("weights must be nonnegative")
        if np.any(np.diag(W) != 0):
            raise GraphError("weights must have a zero diagonal")
        if not np.array_equal(W, W.T):
            raise GraphError("weights must be symmetric")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @property
    def node_count(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[Sequence[float]]) -> "WeightedGraph":
        """Build from ``(u, v, weight)`` triples with 1-based node indices."""
        W = np.zeros((node_count, node_count))
        for edge in edges:
            if len(edge) == 2:
                u, v = edge
                wt = 1.0
            elif len(edge) == 3:
                u, v, wt = edge
            else:
                raise GraphError(f"edge must be (u, v) or (u, v, weight), got {edge!r}")
            u, v = int(u), int(v)
            if not (1 <= u <= node_count and 1 <= v <= node_count):
                raise GraphError(f"edge ({u}, {v}) out of range for {node_count} nodes")
            if u == v:
                raise GraphError(f"self loop at node {u}")
            W[u - 1, v - 1] = W[v - 1, u - 1] = float(wt)
        return cls(W)

    def edges(self) -> list[tuple[int, int, float]]:
        """Edge list with 1-based indices, each undirected edge once."""
        iu, ju = np.nonzero(np.triu(self.weights))
        return [(int(a) + 1, int(b) + 1, float(self.weights[a, b])) for a, b in zip(iu, ju)]

    @classmethod
    def complete(cls, node_count: int, weight: float = 1.0) -> "WeightedGraph":
        return cls(weight * (np.ones((node_count, node_count)) - np.eye(node_count)))

    @classmethod
    def path(cls, node_count: int, weight: float = 1.0) -> "WeightedGraph":
        return cls.from_edges(node_count, [(k, k + 1, weight) for k in range(1, node_count)])

    @classmethod
    def ring(cls, node_count: int, weight: float = 1.0) -> "WeightedGraph":
        if node_count < 3:
            return cls.path(node_count, weight)
        edges = [(k, k + 1, weight) for k in range(1, node_count)] + [(node_count, 1, weight)]
        return cls.from_edges(node_count, edges)

    @classmethod
    def star(cls, node_count: int, weight: float = 1.0) -> "WeightedGraph":
        return cls.from_edges(node_count, [(1, k, weight) for k in range(2, node_count + 1)])


@dataclass(frozen=True)
class ClusterTopology:
    """Inner (intra-cluster) graphs plus the graph linking cluster leaders."""

    inner: tuple[WeightedGraph, ...]
    leader: WeightedGraph

    def __post_init__(self):
        object.__setattr__(self, "inner", tuple(self.inner))
        if self.leader.node_count != len(self.inner):
            raise GraphError(
                f"leader graph has {self.leader.node_count} nodes but there are {len(self.inner)} clusters"
            )

    @property
    def cluster_sizes(self) -> tuple[int, ...]:
        return tuple(g.node_count for g in self.inner)

    @classmethod
    def complete(cls, cluster_sizes: Sequence[int], weight: float = 1.0) -> "ClusterTopology":
        return cls(
            tuple(WeightedGraph.complete(s, weight) for s in cluster_sizes),
            WeightedGraph.complete(len(cluster_sizes), weight),
        )


def _check_symmetric(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise GraphError(f"expected a square matrix, got shape {L.shape}")
    if not np.allclose(L, L.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(L).max(initial=0.0))):
        raise GraphError("matrix is not symmetric")
    return L


def laplacian(g: WeightedGraph) -> np.ndarray:
    """``Deg - W`` for the graph ``g``."""
    W = g.weights
    return np.diag(W.sum(axis=1)) - W


def expand_leader_laplacian(leader_L0: np.ndarray, cluster_sizes: Sequence[int]) -> np.ndarray:
    """Embed the m x m leader Laplacian into an n x n matrix.

    Entry ``(j, l)`` of ``leader_L0`` becomes an ``n_j x n_l`` block whose only
    nonzero is its top-left corner, so the result acts on leader agents only.
    """
    L0 = np.asarray(leader_L0, dtype=float)
    sizes = [int(s) for s in cluster_sizes]
    if L0.ndim != 2 or L0.shape != (len(sizes), len(sizes)):
        raise GraphError(f"leader Laplacian shape {L0.shape} does not match {len(sizes)} clusters")
    if any(s < 1 for s in sizes):
        raise GraphError("cluster sizes must be positive")
    leaders = leader_indices(sizes)
    n = sum(sizes)
    out = np.zeros((n, n))
    out[np.ix_(leaders, leaders)] = L0
    return out


def leader_indices(cluster_sizes: Sequence[int]) -> np.ndarray:
    """Flat (0-based) agent index of the first agent of every cluster."""
    return np.concatenate(([0], np.cumsum(cluster_sizes)[:-1])).astype(int)


def _spectrum(L: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(_check_symmetric(L))


def smallest_positive_eigenvalue(L: np.ndarray) -> float:
    """Smallest strictly positive eigenvalue of ``L`` (0 if there is none)."""
    ev = _spectrum(L)
    scale = np.linalg.norm(L, 2) if L.size else 0.0
    pos = ev[ev > ZERO_RTOL * scale]
    return float(pos.min()) if pos.size and scale > 0 else 0.0


def second_smallest_eigenvalue(L: np.ndarray) -> float:
    """Literal ``s_2``: the second entry of the ascending spectrum (0 for 1x1)."""
    ev = _spectrum(L)
    if ev.size < 2:
        return 0.0
    val = float(ev[1])
    scale = np.abs(ev).max()
    return 0.0 if abs(val) <= ZERO_RTOL * scale else val


def algebraic_connectivity(L: np.ndarray) -> float:
    """Fiedler value of a Laplacian: positive exactly when the graph is connected."""
    return second_smallest_eigenvalue(L)


def spectral_max(L: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    return float(_spectrum(L)[-1])


def is_connected(g: WeightedGraph) -> bool:
    """Union-find over the positive-weight edges."""
    parent = list(range(g.node_count))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in zip(*np.nonzero(g.weights > 0)):
        ru, rv = find(int(u)), find(int(v))
        if ru != rv:
            parent[ru] = rv
    return len({find(a) for a in range(g.node_count)}) == 1


@dataclass(frozen=True)
class TopologyVerdict:
    ok: bool
    offender: str | None = None
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_topology(t: ClusterTopology) -> TopologyVerdict:
    """Accept iff every inner graph and the leader graph is connected."""
    for j, g in enumerate(t.inner):
        if not is_connected(g):
            return TopologyVerdict(False, f"cluster {j + 1}", f"inner graph of cluster {j + 1} is disconnected")
    if not is_connected(t.leader):
        return TopologyVerdict(False, "leader", "leader graph is disconnected")
    return TopologyVerdict(True)


@dataclass(frozen=True)
class LaplacianSet:
    per_cluster: tuple[np.ndarray, ...]
    block_diag_L: np.ndarray
    leader_L0: np.ndarray
    expanded_L0: np.ndarray
    leaders: np.ndarray = field(repr=False)

    @classmethod
    def from_topology(cls, t: ClusterTopology) -> "LaplacianSet":
        per = tuple(laplacian(g) for g in t.inner)
        sizes = t.cluster_sizes
        n = sum(sizes)
        L = np.zeros((n, n))
        start = 0
        for Lj in per:
            k = Lj.shape[0]
            L[start:start + k, start:start + k] = Lj
            start += k
        L0 = laplacian(t.leader)
        out = cls(per, L, L0, expand_leader_laplacian(L0, sizes), leader_indices(sizes))
        for arr in (*per, L, L0, out.expanded_L0):
            arr.setflags(write=False)
        return out

    @property
    def combined(self) -> np.ndarray:
        """``L + L̂⁰``: its null space is exactly the estimate-consensus subspace."""
        return self.block_diag_L + self.expanded_L0
