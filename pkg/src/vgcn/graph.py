"""Graphs, adjacency normalisation and three-way skeleton partitioning.

Matrix convention used throughout the package: entry ``[i, j]`` weights the
message that node ``i`` receives from node ``j``, so ``A_hat @ S`` (rows of
``S`` are nodes) aggregates neighbours into each receiving node.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class GraphSpec:
    adjacency: np.ndarray
    undirected: bool = True

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValidationError([f"adjacency must be a non-empty square matrix, got shape {a.shape}"])
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n_nodes: int, edges, undirected: bool = True) -> "GraphSpec":
        a = np.zeros((n_nodes, n_nodes))
        for u, v in edges:
            a[u, v] = 1.0
            if undirected:
                a[v, u] = 1.0
        return cls(a, undirected)

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(u, v)`` with ``u < v`` (or all nonzero pairs if directed)."""
        rows, cols = np.nonzero(self.adjacency)
        if self.undirected:
            return [(int(u), int(v)) for u, v in zip(rows, cols) if u < v]
        return [(int(u), int(v)) for u, v in zip(rows, cols)]


def validate_graph(g: GraphSpec) -> list[str]:
    """Return a list of violations; an empty list means the graph is valid."""
    a = g.adjacency
    problems = []
    bad = np.argwhere((a != 0) & (a != 1))
    for i, j in bad:
        problems.append(f"non-binary entry {a[i, j]!r} at ({i}, {j})")
    for i in np.nonzero(np.diag(a))[0]:
        problems.append(f"nonzero diagonal at {i}")
    if g.undirected:
        for i, j in np.argwhere(a != a.T):
            if i < j:
                problems.append(f"asymmetry at ({i}, {j}): {a[i, j]!r} vs {a[j, i]!r}")
    return problems


def check_graph(g: GraphSpec) -> GraphSpec:
    problems = validate_graph(g)
    if problems:
        raise ValidationError(problems)
    return g


def normalize_adjacency(a) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with degrees taken as row sums of ``A + I``.

    Accepts a :class:`GraphSpec`, an ``(N, N)`` matrix or a batch
    ``(B, N, N)``.
    """
    if isinstance(a, GraphSpec):
        a = a.adjacency
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    a_loop = a + np.eye(n)
    d = a_loop.sum(axis=-1)
    inv = 1.0 / np.sqrt(d)
    return inv[..., :, None] * a_loop * inv[..., None, :]


def hop_distances(g: GraphSpec, center: int) -> np.ndarray:
    """Breadth-first hop count from ``center``; unreachable nodes get -1."""
    n = g.n_nodes
    dist = np.full(n, -1, dtype=int)
    dist[center] = 0
    queue = deque([center])
    nbrs = [np.nonzero(g.adjacency[i] + g.adjacency[:, i])[0] for i in range(n)]
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@dataclass(frozen=True)
class PartitionedAdjacency:
    """Self, centripetal and centrifugal connection patterns plus their normalisations."""

    partitions: tuple
    center_node: int
    normalized: tuple = field(default=None)

    def __post_init__(self):
        parts = tuple(np.array(p, dtype=np.float64) for p in self.partitions)
        for p in parts:
            p.setflags(write=False)
        object.__setattr__(self, "partitions", parts)
        if self.normalized is None:
            normed = tuple(normalize_adjacency(p) for p in parts)
        else:
            normed = tuple(np.array(p, dtype=np.float64) for p in self.normalized)
        for p in normed:
            p.setflags(write=False)
        object.__setattr__(self, "normalized", normed)

    @property
    def n_nodes(self) -> int:
        return self.partitions[0].shape[0]

    def __len__(self) -> int:
        return len(self.partitions)


def partition_skeleton(g: GraphSpec, center_node: int, joint_distances=None) -> PartitionedAdjacency:
    """Split a skeleton into self (A_1), centripetal (A_2) and centrifugal (A_3) parts.

    For an undirected edge ``(u, v)`` the direction *into* the endpoint nearer
    the center is centripetal.  When both endpoints are equally far, the
    direction into the lower-indexed node counts as centripetal.
    """
    n = g.n_nodes
    if not 0 <= center_node < n:
        raise ValidationError([f"center node {center_node} outside 0..{n - 1}"])
    check_graph(g)
    if joint_distances is None:
        dist = hop_distances(g, center_node)
    else:
        dist = np.asarray(joint_distances, dtype=int)
        if dist.shape != (n,):
            raise ValidationError([f"expected {n} joint distances, got shape {dist.shape}"])
    a = g.adjacency
    sym = np.maximum(a, a.T)
    bad = []
    a2 = np.zeros((n, n))
    a3 = np.zeros((n, n))
    for u in range(n):
        for v in range(u + 1, n):
            if not sym[u, v]:
                continue
            if abs(int(dist[u]) - int(dist[v])) > 1 or dist[u] < 0 or dist[v] < 0:
                bad.append(f"edge ({u}, {v}) has inconsistent distances {dist[u]} and {dist[v]}")
                continue
            near, far = (u, v) if dist[u] <= dist[v] else (v, u)
            # near receives from far: centripetal; the reverse direction is centrifugal
            a2[near, far] = 1.0
            a3[far, near] = 1.0
    if bad:
        raise ValidationError(bad)
    return PartitionedAdjacency((np.eye(n), a2, a3), center_node)


def partition_violations(parts: PartitionedAdjacency, g: GraphSpec) -> list[str]:
    """Brute-force check of the partition invariants over every ordered pair."""
    a1, a2, a3 = parts.partitions
    a = np.maximum(g.adjacency, g.adjacency.T)
    out = []
    n = g.n_nodes
    for i in range(n):
        for j in range(n):
            if a1[i, j] != (1.0 if i == j else 0.0):
                out.append(f"A_1[{i},{j}]={a1[i, j]}")
            if a2[i, j] + a3[i, j] != a[i, j]:
                out.append(f"A_2+A_3 != A at ({i},{j})")
            if a2[i, j] * a3[i, j] != 0:
                out.append(f"A_2 and A_3 overlap at ({i},{j})")
    return out


def toy_skeleton(n_joints: int = 7) -> GraphSpec:
    """A small tree: joint ``j > 0`` hangs off joint ``(j - 1) // 2``; joint 0 is the center."""
    return GraphSpec.from_edges(n_joints, [((j - 1) // 2, j) for j in range(1, n_joints)])
