"""Graph representation, JSON ingestion, splits, and synthetic generators.

Graphs are immutable after load. Neighborhoods N(i) are stored CSR-style
keyed by destination node: row i lists the source nodes whose messages node
i aggregates. Undirected input edges are expanded to two directed arcs, and
a self-loop is added for every node, so in-degree is always >= 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph JSON file violates the schema."""


@dataclass(frozen=True)
class DatasetSpec:
    task: str            # "single" | "multi"
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        if self.task not in ("single", "multi"):
            raise GraphFormatError(f"unknown task kind {self.task!r}")
        if self.num_classes < 2:
            raise GraphFormatError("num_classes must be >= 2")


@dataclass
class Graph:
    num_nodes: int
    features: np.ndarray          # num_nodes x D_in
    csr_offsets: np.ndarray       # num_nodes + 1
    csr_targets: np.ndarray       # source node per arc, grouped by destination
    labels: np.ndarray            # (n,) int for single-label, (n, C) 0/1 for multi
    spec: DatasetSpec
    masks: dict = field(default_factory=dict)   # name -> bool ndarray
    degrees: np.ndarray = None                  # in-neighbor counts incl. self-loop

    def __post_init__(self):
        if self.degrees is None:
            self.degrees = np.diff(self.csr_offsets).astype(np.float64)

    @property
    def edge_dst(self):
        """Destination node id per arc (the segment key for aggregation)."""
        return np.repeat(np.arange(self.num_nodes), np.diff(self.csr_offsets))

    @property
    def edge_src(self):
        return self.csr_targets

    def neighbors(self, i):
        return self.csr_targets[self.csr_offsets[i]:self.csr_offsets[i + 1]]


def _build_csr(num_nodes, arcs):
    """CSR over (dst, src) arcs; dedupes, adds self-loops."""
    arcs = set(arcs)
    arcs.update((i, i) for i in range(num_nodes))
    dst = np.fromiter((d for d, _ in sorted(arcs)), dtype=np.int64, count=len(arcs))
    src = np.fromiter((s for _, s in sorted(arcs)), dtype=np.int64, count=len(arcs))
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(offsets, dst + 1, 1)
    offsets = np.cumsum(offsets)
    return offsets, src


def _make_graph(num_nodes, features, edges, labels, spec, masks=None):
    arcs = []
    for s, d in edges:
        arcs.append((d, s))
        arcs.append((s, d))
    offsets, targets = _build_csr(num_nodes, arcs)
    return Graph(
        num_nodes=num_nodes,
        features=np.asarray(features, dtype=np.float64),
        csr_offsets=offsets,
        csr_targets=targets,
        labels=np.asarray(labels),
        spec=spec,
        masks=dict(masks or {}),
    )


# -- JSON ingestion -----------------------------------------------------------

def load_graph_json(path):
    """Load and validate a Graph from the canonical JSON schema."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return graph_from_dict(doc)


def graph_from_dict(doc):
    required = {"num_nodes", "feature_dim", "task", "num_classes", "features", "edges", "labels"}
    missing = required - set(doc)
    if missing:
        raise GraphFormatError(f"missing keys: {sorted(missing)}")
    n = int(doc["num_nodes"])
    d = int(doc["feature_dim"])
    spec = DatasetSpec(doc["task"], int(doc["num_classes"]), d)

    features = np.asarray(doc["features"], dtype=np.float64)
    if features.shape != (n, d):
        raise GraphFormatError(f"features shape {features.shape} != ({n}, {d})")

    seen = set()
    for k, e in enumerate(doc["edges"]):
        if len(e) != 2:
            raise GraphFormatError(f"edge #{k} is not a pair: {e!r}")
        s, t = int(e[0]), int(e[1])
        if not (0 <= s < n and 0 <= t < n):
            raise GraphFormatError(f"edge #{k} = ({s}, {t}) out of range for {n} nodes")
        if (s, t) in seen:
            raise GraphFormatError(f"duplicate edge #{k} = ({s}, {t})")
        seen.add((s, t))

    labels = np.asarray(doc["labels"])
    if spec.task == "single":
        if labels.shape != (n,):
            raise GraphFormatError(f"labels shape {labels.shape} != ({n},)")
        if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
            raise GraphFormatError("label index out of range")
        labels = labels.astype(np.int64)
    else:
        if labels.shape != (n, spec.num_classes):
            raise GraphFormatError(f"labels shape {labels.shape} != ({n}, {spec.num_classes})")
        labels = labels.astype(np.float64)

    masks = {}
    for name, idx in (doc.get("masks") or {}).items():
        if name not in ("train", "val", "test"):
            raise GraphFormatError(f"unknown mask {name!r}")
        m = np.zeros(n, dtype=bool)
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise GraphFormatError(f"mask {name!r} index out of range")
        m[idx] = True
        masks[name] = m
    for a in masks:
        for b in masks:
            if a < b and (masks[a] & masks[b]).any():
                raise GraphFormatError(f"masks {a!r} and {b!r} overlap")

    return _make_graph(n, features, [(int(s), int(t)) for s, t in doc["edges"]], labels, spec, masks)


def graph_to_dict(graph):
    """Serialize to the canonical schema. Self-loops are dropped (re-added on load)."""
    arcs = sorted(
        (int(s), int(d))
        for d in range(graph.num_nodes)
        for s in graph.neighbors(d)
        if s != d
    )
    doc = {
        "num_nodes": graph.num_nodes,
        "feature_dim": graph.spec.feature_dim,
        "task": graph.spec.task,
        "num_classes": graph.spec.num_classes,
        "features": graph.features.tolist(),
        "edges": [list(a) for a in arcs],
        "labels": graph.labels.tolist(),
    }
    if graph.masks:
        doc["masks"] = {k: np.flatnonzero(v).tolist() for k, v in sorted(graph.masks.items())}
    return doc


def save_graph_json(graph, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph_to_dict(graph), f, sort_keys=True)


# -- splits --------------------------------------------------------------------

def random_split(graph, ratios=(0.6, 0.2, 0.2), seed=0):
    """Seeded random 60/20/20 repartition: floor rounding, remainder to test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = graph.num_nodes
    if n < 5:
        raise ValueError("random_split needs at least 5 nodes")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    masks = {}
    for name, part in (
        ("train", perm[:n_train]),
        ("val", perm[n_train:n_train + n_val]),
        ("test", perm[n_train + n_val:]),
    ):
        m = np.zeros(n, dtype=bool)
        m[part] = True
        masks[name] = m
    out = Graph(
        num_nodes=graph.num_nodes,
        features=graph.features,
        csr_offsets=graph.csr_offsets,
        csr_targets=graph.csr_targets,
        labels=graph.labels,
        spec=graph.spec,
        masks=masks,
        degrees=graph.degrees,
    )
    return out


# -- synthetic generators --------------------------------------------------------

def generate_sbm(num_classes, nodes_per_class, p_in, p_out, feature_dim,
                 feature_noise, seed):
    """Stochastic-block-model graph with noisy one-hot centroid features."""
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if feature_dim < num_classes:
        raise ValueError("feature_dim must be >= num_classes")
    rng = np.random.default_rng(seed)
    n = num_classes * nodes_per_class
    labels = np.repeat(np.arange(num_classes), nodes_per_class)

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            p = p_in if labels[i] == labels[j] else p_out
            if rng.random() < p:
                edges.append((i, j))

    centroids = np.zeros((num_classes, feature_dim))
    centroids[np.arange(num_classes), np.arange(num_classes)] = 1.0
    features = centroids[labels] + feature_noise * rng.standard_normal((n, feature_dim))

    spec = DatasetSpec("single", num_classes, feature_dim)
    return _make_graph(n, features, edges, labels, spec), spec


def generate_chain_task(length, num_blocks_needed, seed, feature_dim=8,
                        distractor_degree=8, noise=0.3):
    """Binary task whose labels are a linear function of the raw input features.

    Edges are random distractors, so message passing mixes classes while a
    direct input->output shortcut sees clean, linearly separable features.
    The label direction component of the noise is projected out, making the
    train set exactly separable.
    """
    if length < 20:
        raise ValueError("generate_chain_task needs length >= 20")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=length)
    v = rng.standard_normal(feature_dim)
    v /= np.linalg.norm(v)
    eps = noise * rng.standard_normal((length, feature_dim))
    eps -= np.outer(eps @ v, v)   # keep the margin direction clean
    features = np.outer(2.0 * labels - 1.0, v) + eps

    edges = {(i, i + 1) for i in range(length - 1)}
    for i in range(length):
        for j in rng.integers(0, length, size=distractor_degree):
            if i != j:
                edges.add((min(i, int(j)), max(i, int(j))))

    spec = DatasetSpec("single", 2, feature_dim)
    graph = _make_graph(length, features, sorted(edges), labels, spec)
    return graph, spec
