"""Hierarchical part graph: fixed topology, per-image edge weights, row normalization."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dataset import PartitionSpec


@dataclass(frozen=True)
class GraphTopology:
    spec: PartitionSpec
    nodes: tuple[tuple[int, int], ...]
    edges: tuple[tuple[int, int], ...]  # (a, b) node indices with a < b

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        return e[:, 0], e[:, 1]

    def mask(self) -> np.ndarray:
        m = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        a, b = self.edge_index()
        m[a, b] = m[b, a] = True
        return m


def _intra_edges(n: int) -> set[tuple[int, int]]:
    # neighbours are vertically adjacent stripes; a common neighbour within the level also links
    adj = {i: {j for j in (i - 1, i + 1) if 0 <= j < n} for i in range(n)}
    return {(i, j) for i in range(n) for j in range(i + 1, n) if j in adj[i] or adj[i] & adj[j]}


def _contains(n_p: int, i: int, n_q: int, j: int) -> bool:
    # stripe i of n_p covers [i/n_p, (i+1)/n_p); stripe j of n_q must lie inside it
    lo, hi = Fraction(i, n_p), Fraction(i + 1, n_p)
    return lo <= Fraction(j, n_q) and Fraction(j + 1, n_q) <= hi


def build_topology(spec: PartitionSpec = PartitionSpec()) -> GraphTopology:
    nodes = tuple(spec.nodes())
    offsets = np.cumsum((0,) + spec.levels[:-1])
    edges = set()
    for p, n in enumerate(spec.levels):
        for i, j in _intra_edges(n):
            edges.add((offsets[p] + i, offsets[p] + j))
    for p, n_p in enumerate(spec.levels):
        for q in range(p + 1, len(spec.levels)):
            n_q = spec.levels[q]
            for i in range(n_p):
                for j in range(n_q):
                    if _contains(n_p, i, n_q, j):
                        edges.add((offsets[p] + i, offsets[q] + j))
    return GraphTopology(spec, nodes, tuple(sorted((int(a), int(b)) for a, b in edges)))


def edge_distances(x: np.ndarray, topo: GraphTopology) -> np.ndarray:
    """Euclidean distance per topology edge; ``x`` is (..., N, d)."""
    a, b = topo.edge_index()
    return np.linalg.norm(x[..., a, :] - x[..., b, :], axis=-1)


def auto_delta(x, topo: GraphTopology) -> np.ndarray | float:
    """Mean edge distance (1 when that mean is 0). Batched over leading axes."""
    if topo.num_edges == 0:
        raise ValueError("auto_delta needs at least one edge")
    x = getattr(x, "vectors", x)
    d = edge_distances(np.asarray(x, dtype=np.float64), topo).mean(axis=-1)
    d = np.where(d > 0, d, 1.0)
    return float(d) if d.ndim == 0 else d


def edge_weights(x, topo: GraphTopology, delta=None) -> np.ndarray:
    """Weighted adjacency exp(-||x_a - x_b|| / delta) on edges, 0 elsewhere.

    ``delta=None`` uses :func:`auto_delta` per image. Output is float64 with
    shape (..., N, N).
    """
    x = np.asarray(getattr(x, "vectors", x), dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite part features")
    if x.shape[-2] != topo.num_nodes:
        raise ValueError(f"expected {topo.num_nodes} part vectors, got {x.shape[-2]}")
    if delta is None:
        delta = auto_delta(x, topo) if topo.num_edges else 1.0
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    a, b = topo.edge_index()
    w = np.exp(-edge_distances(x, topo) / delta[..., None])
    A = np.zeros(x.shape[:-1] + (topo.num_nodes,))
    A[..., a, b] = w
    A[..., b, a] = w
    return A


def row_normalize(A: np.ndarray) -> np.ndarray:
    """D^-1 A; an all-zero row becomes the unit self row."""
    A = np.asarray(A, dtype=np.float64)
    s = A.sum(axis=-1, keepdims=True)
    out = np.divide(A, s, out=np.zeros_like(A), where=s > 0)
    n = A.shape[-1]
    empty = (s[..., 0] == 0)
    if np.any(empty):
        eye = np.broadcast_to(np.eye(n), A.shape)
        out = np.where(empty[..., None], eye, out)
    return out


def normalized_adjacency(x, topo: GraphTopology, delta=None) -> np.ndarray:
    return row_normalize(edge_weights(x, topo, delta))
