"""Synthetic ego-graph and skeleton-motion tasks, dataset files and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .graph import GraphSpec, PartitionedAdjacency, check_graph, partition_skeleton, toy_skeleton
from .rng import RandomStream

EGO_RULES = ("neighbor-majority", "xor-pair")


@dataclass
class SpatialSample:
    graph: GraphSpec
    features: np.ndarray
    label: int

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes


@dataclass
class SpatialDataset:
    """Ego-graph samples; node 0 of every graph is the ego."""

    samples: list
    n_classes: int
    task_tag: str = "lead-lag"
    kind: str = field(default="spatial", init=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_features(self) -> int:
        return self.samples[0].features.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)


@dataclass
class TemporalSample:
    features: np.ndarray  # (C, T, N)
    label: int


@dataclass
class SpatioTemporalDataset:
    skeleton: GraphSpec
    center_node: int
    samples: list
    n_classes: int
    kind: str = field(default="spatiotemporal", init=False)
    partitions: PartitionedAdjacency = field(default=None)

    def __post_init__(self):
        if self.partitions is None:
            self.partitions = partition_skeleton(self.skeleton, self.center_node)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_features(self) -> int:
        return self.samples[0].features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.skeleton.n_nodes

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)


# ---------------------------------------------------------------------------
# generators


def ego_graph(n_nodes: int, periphery: str) -> GraphSpec:
    """Hub node 0 linked to every other node; the others form a ring or a star."""
    edges = [(0, j) for j in range(1, n_nodes)]
    if periphery == "ring" and n_nodes > 2:
        ring = list(range(1, n_nodes))
        edges += [(ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))
                  if ring[i] != ring[(i + 1) % len(ring)]]
    edges = sorted({(min(u, v), max(u, v)) for u, v in edges})
    return GraphSpec.from_edges(n_nodes, edges)


def ego_label(actions: np.ndarray, rule: str) -> int:
    """Label of the ego from its neighbours' actions (``actions[0]`` is the ego itself)."""
    if rule == "neighbor-majority":
        return int(actions[1:].sum() > 0)
    return int((actions[1] > 0) != (actions[2] > 0))


def gen_ego_task(n_samples: int, n_nodes_range=(5, 9), n_features: int = 4,
                 rule: str = "neighbor-majority", noise: float = 0.0, seed: int = 0,
                 task_tag: str = "lead-lag") -> SpatialDataset:
    """Random ego graphs labelled from the neighbours' +-1 actions.

    Feature 0 is the action (0 for the ego), feature 1 flags the ego and the
    remaining features are standard normal distractors.  The label is drawn
    uniformly first and actions are resampled until the rule agrees, so
    classes are balanced; then labels flip with probability ``noise``.
    """
    lo, hi = (int(v) for v in n_nodes_range)
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if lo < 3 or hi < lo:
        raise ConfigError(f"node range must satisfy 3 <= low <= high, got {n_nodes_range}")
    if n_features < 2:
        raise ConfigError("ego features need at least 2 channels (action and ego flag)")
    if rule not in EGO_RULES:
        raise ConfigError(f"rule must be one of {EGO_RULES}, got {rule!r}")
    if not 0.0 <= noise < 1.0:
        raise ConfigError(f"noise must lie in [0, 1), got {noise}")
    samples = []
    for i in range(n_samples):
        rng = RandomStream(seed, (i,))
        n = int(rng.integers(lo, hi + 1))
        graph = ego_graph(n, "ring" if rng.integers(0, 2) else "star")
        label = int(rng.integers(0, 2))
        while True:
            actions = rng.integers(0, 2, n).astype(np.float64) * 2.0 - 1.0
            actions[0] = 0.0
            if ego_label(actions, rule) == label:
                break
        x = np.zeros((n, n_features))
        x[:, 0] = actions
        x[0, 1] = 1.0
        if n_features > 2:
            x[:, 2:] = rng.normal((n, n_features - 2))
        if noise > 0 and rng.uniform() < noise:
            label = 1 - label
        samples.append(SpatialSample(graph, x, label))
    return SpatialDataset(samples, 2, task_tag)


def gen_skeleton_task(n_samples: int, n_joints: int = 7, T: int = 16, motion_classes: int = 2,
                      noise: float = 0.0, seed: int = 0, channels: int = 2) -> SpatioTemporalDataset:
    """Joint trajectories on a tree skeleton; class ``c`` oscillates ``1 + 2c`` times over ``T`` frames.

    Each sample has a random phase and amplitude; deeper joints swing wider
    and lag slightly.  ``noise`` is the standard deviation of additive
    Gaussian coordinate noise.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if n_joints < 3:
        raise ConfigError(f"n_joints must be >= 3, got {n_joints}")
    if T < 8:
        raise ConfigError(f"T must be >= 8, got {T}")
    if motion_classes < 2:
        raise ConfigError("need at least two motion classes")
    if 1 + 2 * (motion_classes - 1) >= T / 2:
        raise ConfigError(f"{motion_classes} classes need more than {T} frames to stay below Nyquist")
    if noise < 0 or channels < 1:
        raise ConfigError("noise must be >= 0 and channels >= 1")
    skeleton = toy_skeleton(n_joints)
    depth = np.floor(np.log2(np.arange(n_joints) + 1))
    t = np.arange(T)[:, None]
    samples = []
    for i in range(n_samples):
        rng = RandomStream(seed, (i,))
        label = int(rng.integers(0, motion_classes))
        phase = float(rng.uniform(0.0, 2 * np.pi))
        amp = float(rng.uniform(0.75, 1.25))
        freq = 1 + 2 * label
        angle = 2 * np.pi * freq * t / T + phase + 0.3 * depth[None, :]
        x = np.empty((channels, T, n_joints))
        for c in range(channels):
            wave = np.sin(angle + c * np.pi / 2)
            x[c] = amp * (1.0 + 0.25 * depth[None, :]) * wave
        if noise > 0:
            x = x + noise * rng.normal(x.shape)
        samples.append(TemporalSample(x, label))
    return SpatioTemporalDataset(skeleton, 0, samples, motion_classes)


# ---------------------------------------------------------------------------
# splits and batches


def split_indices(n: int, seed: int = 0, fractions=(0.6, 0.2, 0.2)):
    """Deterministic train/validation/test index split."""
    if n < 1:
        raise DataError("cannot split an empty dataset")
    perm = RandomStream(seed, (0x5,)).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


def iter_batches(ds, indices, batch_size: int, rng: RandomStream | None = None):
    """Yield ``(x, graph, labels, indices)`` batches.

    Spatial samples are grouped by node count so each batch stacks; the
    graph is a :class:`GraphBatch`.  Spatio-temporal batches share the
    dataset's :class:`PartitionedAdjacency`.  With ``rng`` the order is shuffled.
    """
    from .models import GraphBatch

    indices = np.asarray(indices, dtype=int)
    if rng is not None:
        indices = indices[rng.permutation(len(indices))]
    if ds.kind == "spatial":
        groups: dict = {}
        for i in indices:
            groups.setdefault(ds.samples[i].n_nodes, []).append(int(i))
        chunks = [g[s:s + batch_size] for n in sorted(groups) for g in [groups[n]]
                  for s in range(0, len(g), batch_size)]
    else:
        chunks = [list(indices[s:s + batch_size]) for s in range(0, len(indices), batch_size)]
    if rng is not None and len(chunks) > 1:
        chunks = [chunks[j] for j in rng.permutation(len(chunks))]
    for chunk in chunks:
        labels = np.array([ds.samples[i].label for i in chunk], dtype=int)
        x = np.stack([ds.samples[i].features for i in chunk])
        if ds.kind == "spatial":
            graph = GraphBatch(np.stack([ds.samples[i].graph.adjacency for i in chunk]))
        else:
            graph = ds.partitions
        yield x, graph, labels, np.array(chunk, dtype=int)


# ---------------------------------------------------------------------------
# files


def dataset_to_dict(ds) -> dict:
    if ds.kind == "spatial":
        return {"kind": "spatial", "n_classes": ds.n_classes, "task_tag": ds.task_tag, "adjacency": None,
                "samples": [{"x": s.features.tolist(), "label": int(s.label),
                             "adjacency": s.graph.adjacency.tolist()} for s in ds.samples]}
    return {"kind": "spatiotemporal", "n_classes": ds.n_classes, "center_node": ds.center_node,
            "adjacency": ds.skeleton.adjacency.tolist(),
            "samples": [{"x": s.features.tolist(), "label": int(s.label)} for s in ds.samples]}


def save_dataset(ds, path) -> None:
    text = json.dumps(dataset_to_dict(ds), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n")


def _require(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path)
    if key not in obj:
        raise SchemaError(f'missing field "{key}"', path)
    return obj[key]


def _array(value, ndim: int, path: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"expected a rectangular numeric array ({exc})", path) from None
    if arr.ndim != ndim:
        raise SchemaError(f"expected a {ndim}-d array, got {arr.ndim}-d", path)
    if not np.all(np.isfinite(arr)):
        raise SchemaError("array contains non-finite values", path)
    return arr


def _label(value, n_classes: int, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"label must be an integer, got {value!r}", path)
    if not 0 <= value < n_classes:
        raise SchemaError(f"label {value} outside 0..{n_classes - 1}", path)
    return value


def _graph(value, path: str) -> GraphSpec:
    a = _array(value, 2, path)
    if a.shape[0] != a.shape[1]:
        raise SchemaError(f"adjacency must be square, got {a.shape}", path)
    g = GraphSpec(a)
    check_graph(g)
    return g


def dataset_from_dict(doc) -> SpatialDataset | SpatioTemporalDataset:
    kind = _require(doc, "kind", "$")
    if kind not in ("spatial", "spatiotemporal"):
        raise SchemaError(f"unknown kind {kind!r}", "$.kind")
    n_classes = _require(doc, "n_classes", "$")
    if isinstance(n_classes, bool) or not isinstance(n_classes, int) or n_classes < 1:
        raise SchemaError("n_classes must be a positive integer", "$.n_classes")
    raw = _require(doc, "samples", "$")
    if not isinstance(raw, list) or not raw:
        raise SchemaError("samples must be a non-empty array", "$.samples")
    samples = []
    if kind == "spatial":
        for i, s in enumerate(raw):
            p = f"$.samples[{i}]"
            x = _array(_require(s, "x", p), 2, p + ".x")
            label = _label(_require(s, "label", p), n_classes, p + ".label")
            g = _graph(_require(s, "adjacency", p), p + ".adjacency")
            if x.shape[0] != g.n_nodes:
                raise SchemaError(f"{x.shape[0]} feature rows for {g.n_nodes} nodes", p + ".x")
            samples.append(SpatialSample(g, x, label))
        widths = {s.features.shape[1] for s in samples}
        if len(widths) > 1:
            raise SchemaError(f"samples disagree on feature width: {sorted(widths)}", "$.samples")
        return SpatialDataset(samples, n_classes, doc.get("task_tag", "lead-lag"))
    skeleton = _graph(_require(doc, "adjacency", "$"), "$.adjacency")
    center = doc.get("center_node", 0)
    if not isinstance(center, int) or not 0 <= center < skeleton.n_nodes:
        raise SchemaError(f"center node {center!r} is not a joint index", "$.center_node")
    shape = None
    for i, s in enumerate(raw):
        p = f"$.samples[{i}]"
        x = _array(_require(s, "x", p), 3, p + ".x")
        if x.shape[2] != skeleton.n_nodes:
            raise SchemaError(f"last axis has {x.shape[2]} joints, skeleton has {skeleton.n_nodes}", p + ".x")
        if shape is not None and x.shape != shape:
            raise SchemaError(f"shape {x.shape} differs from the first sample's {shape}", p + ".x")
        shape = x.shape
        samples.append(TemporalSample(x, _label(_require(s, "label", p), n_classes, p + ".label")))
    return SpatioTemporalDataset(skeleton, center, samples, n_classes)


def load_dataset(path) -> SpatialDataset | SpatioTemporalDataset:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not valid JSON ({exc})", "$") from None
    return dataset_from_dict(doc)
