"""Graph records, JSONL I/O, synthetic data, batching and edge perturbation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream


class GraphFormatError(ValueError):
    """A graph record violates the data model."""


class CapacityError(ValueError):
    """Not enough absent node pairs to add the requested edges."""


@dataclass(eq=False)
class Graph:
    x: np.ndarray                 # n x d_in node features
    edges: np.ndarray             # E x 2, undirected, each pair stored once
    edge_x: np.ndarray | None     # E x d_edge or None
    y: np.ndarray                 # T labels in {0, 1}; 0 where unobserved
    mask: np.ndarray              # T observation flags in {0, 1}

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.y.shape[0]

    def copy(self) -> "Graph":
        return Graph(
            self.x.copy(),
            self.edges.copy(),
            None if self.edge_x is None else self.edge_x.copy(),
            self.y.copy(),
            self.mask.copy(),
        )

    def equals(self, other: "Graph") -> bool:
        if (self.edge_x is None) != (other.edge_x is None):
            return False
        same_ex = self.edge_x is None or np.array_equal(self.edge_x, other.edge_x)
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.edges, other.edges)
            and same_ex
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.mask, other.mask)
        )


def validate(g: Graph) -> None:
    """Raise :class:`GraphFormatError` unless ``g`` satisfies the data model."""
    n = g.num_nodes
    if g.x.ndim != 2 or n < 1:
        raise GraphFormatError(f"node features must be a non-empty n x d matrix, got {g.x.shape}")
    if not np.all(np.isfinite(g.x)):
        raise GraphFormatError("node features contain non-finite values")
    if g.edges.ndim != 2 or g.edges.shape[1] != 2:
        raise GraphFormatError(f"edges must be E x 2, got {g.edges.shape}")
    seen = set()
    for i, j in g.edges.tolist():
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"edge [{i},{j}] index out of range for {n} nodes")
        if i == j:
            raise GraphFormatError(f"edge [{i},{j}] is a self-loop")
        key = (i, j) if i < j else (j, i)
        if key in seen:
            raise GraphFormatError(f"duplicate edge [{i},{j}]")
        seen.add(key)
    if g.edge_x is not None and g.edge_x.shape[0] != g.num_edges:
        raise GraphFormatError(f"{g.edge_x.shape[0]} edge feature rows for {g.num_edges} edges")
    if g.y.shape != g.mask.shape or g.y.ndim != 1:
        raise GraphFormatError("labels and mask must be equal-length vectors")
    if not np.all(np.isin(g.y, (0.0, 1.0))) or not np.all(np.isin(g.mask, (0.0, 1.0))):
        raise GraphFormatError("labels and mask must be 0/1")


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

def graph_from_record(rec: dict) -> Graph:
    for key in ("x", "edges", "y"):
        if key not in rec:
            raise GraphFormatError(f"missing field {key!r}")
    try:
        x = np.array(rec["x"], dtype=np.float64)
        edges = np.array(rec["edges"], dtype=np.int64).reshape(-1, 2)
        ex = rec.get("edge_x")
        edge_x = None
        if ex is not None:
            edge_x = np.array(ex, dtype=np.float64)
            if edge_x.size == 0:
                edge_x = edge_x.reshape(0, 0)
        ys = rec["y"]
        y = np.array([0.0 if v is None else float(v) for v in ys])
        mask = np.array([0.0 if v is None else 1.0 for v in ys])
    except (TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed record: {exc}") from None
    if x.ndim == 1 and x.size == 0:
        raise GraphFormatError("graph has no nodes")
    g = Graph(x, edges, edge_x, y, mask)
    validate(g)
    return g


def graph_to_record(g: Graph) -> dict:
    return {
        "x": g.x.tolist(),
        "edges": g.edges.tolist(),
        "edge_x": None if g.edge_x is None else g.edge_x.tolist(),
        "y": [int(v) if m else None for v, m in zip(g.y.tolist(), g.mask.tolist())],
    }


def load_jsonl(path) -> list[Graph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise GraphFormatError("record is not a JSON object")
                graphs.append(graph_from_record(rec))
            except (json.JSONDecodeError, GraphFormatError) as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
    # edgeless graphs serialize edge_x as [], which loses the width
    de = edge_width(graphs)
    for g in graphs:
        if g.edge_x is not None and g.num_edges == 0:
            g.edge_x = np.zeros((0, de))
    return graphs


def save_jsonl(graphs: Sequence[Graph], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), separators=(",", ":")))
            fh.write("\n")
    tmp.replace(path)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

PLANTED_RULES = ("degree_weighted", "node_mean")


def generate_synthetic(
    seed: int,
    n_graphs: int,
    n_nodes_range: tuple[int, int] = (8, 20),
    d_in: int = 8,
    n_tasks: int = 2,
    planted_rule: str = "degree_weighted",
    edge_prob: float = 0.2,
    edge_dim: int = 3,
    missing_rate: float = 0.1,
) -> list[Graph]:
    """Random graphs whose labels follow a planted rule.

    ``degree_weighted``: for each task a fixed random direction ``w`` is
    drawn; the label is ``mean_i sum_{j in N(i)} <x_j, w> > 0``, which equals
    the degree-weighted feature mean, so the edge set carries signal.
    ``node_mean`` ignores edges (a structure-free control).
    """
    lo, hi = n_nodes_range
    if n_graphs < 0:
        raise ValueError("n_graphs must be >= 0")
    if not 1 <= lo <= hi:
        raise ValueError(f"bad node range {n_nodes_range}")
    if d_in < 1 or n_tasks < 1 or edge_dim < 0:
        raise ValueError("d_in and n_tasks must be >= 1, edge_dim >= 0")
    if planted_rule not in PLANTED_RULES:
        raise ValueError(f"unknown planted rule {planted_rule!r}; choose from {PLANTED_RULES}")
    if not 0.0 <= edge_prob <= 1.0 or not 0.0 <= missing_rate < 1.0:
        raise ValueError("edge_prob must be in [0,1] and missing_rate in [0,1)")

    rule_rng = stream(seed, "data/rule")
    w = rule_rng.standard_normal((d_in, n_tasks))
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    rng = stream(seed, "data/graphs")

    graphs = []
    for _ in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        x = rng.standard_normal((n, d_in))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < edge_prob
        edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
        edge_x = None
        if edge_dim > 0:
            kinds = rng.integers(0, edge_dim, size=edges.shape[0])
            edge_x = np.eye(edge_dim)[kinds]
        if planted_rule == "degree_weighted":
            deg = np.bincount(edges.reshape(-1), minlength=n).astype(np.float64)
            score = (deg[:, None] * (x @ w)).mean(axis=0)
        else:
            score = (x @ w).mean(axis=0)
        y = (score > 0).astype(np.float64)
        mask = (rng.random(n_tasks) >= missing_rate).astype(np.float64)
        y = y * mask
        graphs.append(Graph(x, edges, edge_x, y, mask))
    return graphs


# --------------------------------------------------------------------------
# Perturbation
# --------------------------------------------------------------------------

def _count(p: float, num_edges: int) -> int:
    # rounding guards against 0.6 * 10 == 5.999...
    return int(math.floor(round(p * num_edges, 9)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def perturb_edges_delete(g: Graph, p: float, seed) -> Graph:
    """Remove exactly ``floor(p * |E|)`` edges chosen uniformly at random."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"deletion fraction must be in [0, 1], got {p}")
    k = _count(p, g.num_edges)
    if k == 0:
        return g.copy()
    drop = _as_rng(seed).choice(g.num_edges, size=k, replace=False)
    keep = np.ones(g.num_edges, dtype=bool)
    keep[drop] = False
    return Graph(
        g.x.copy(),
        g.edges[keep].copy(),
        None if g.edge_x is None else g.edge_x[keep].copy(),
        g.y.copy(),
        g.mask.copy(),
    )


def perturb_edges_add(g: Graph, p: float, seed) -> Graph:
    """Add exactly ``floor(p * |E|)`` new edges sampled from absent pairs.

    New edges get all-zero edge features when the graph has edge features.
    """
    if p < 0.0 or not math.isfinite(p):
        raise ValueError(f"addition fraction must be >= 0, got {p}")
    k = _count(p, g.num_edges)
    if k == 0:
        return g.copy()
    n = g.num_nodes
    present = {(min(i, j), max(i, j)) for i, j in g.edges.tolist()}
    iu, ju = np.triu_indices(n, k=1)
    absent = [(i, j) for i, j in zip(iu.tolist(), ju.tolist()) if (i, j) not in present]
    if k > len(absent):
        raise CapacityError(f"cannot add {k} edges: only {len(absent)} absent pairs")
    pick = _as_rng(seed).choice(len(absent), size=k, replace=False)
    new = np.array([absent[i] for i in pick], dtype=np.int64).reshape(-1, 2)
    edge_x = None
    if g.edge_x is not None:
        edge_x = np.concatenate([g.edge_x, np.zeros((k, g.edge_x.shape[1]))], axis=0)
    return Graph(g.x.copy(), np.concatenate([g.edges, new], axis=0), edge_x, g.y.copy(), g.mask.copy())


def perturb(g: Graph, kind: str, p: float, seed) -> Graph:
    if kind == "delete":
        return perturb_edges_delete(g, p, seed)
    if kind == "add":
        return perturb_edges_add(g, p, seed)
    raise ValueError(f"unknown perturbation kind {kind!r}")


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------

@dataclass(eq=False)
class BatchedGraph:
    x: np.ndarray            # N x d_in
    src: np.ndarray          # directed message sources (both directions)
    dst: np.ndarray          # directed message targets
    edge_x: np.ndarray | None
    node_graph: np.ndarray   # N, nondecreasing graph id per node
    node_offsets: np.ndarray  # G + 1 prefix sums of node counts
    y: np.ndarray            # G x T
    mask: np.ndarray         # G x T

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.y.shape[0]

    @property
    def nodes_per_graph(self) -> np.ndarray:
        return np.diff(self.node_offsets)


def edge_width(graphs: Sequence[Graph]) -> int:
    widths = {g.edge_x.shape[1] for g in graphs if g.edge_x is not None and g.num_edges > 0}
    if len(widths) > 1:
        raise GraphFormatError(f"inconsistent edge feature widths {sorted(widths)}")
    return widths.pop() if widths else 0


def batch(graphs: Sequence[Graph]) -> BatchedGraph:
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    d_in = graphs[0].x.shape[1]
    n_tasks = graphs[0].num_tasks
    de = edge_width(graphs)
    xs, srcs, dsts, exs, seg, ys, ms = [], [], [], [], [], [], []
    offsets = [0]
    for gi, g in enumerate(graphs):
        if g.x.shape[1] != d_in:
            raise GraphFormatError(f"graph {gi} has {g.x.shape[1]} features, expected {d_in}")
        if g.num_tasks != n_tasks:
            raise GraphFormatError(f"graph {gi} has {g.num_tasks} tasks, expected {n_tasks}")
        off = offsets[-1]
        a = g.edges[:, 0] + off
        b = g.edges[:, 1] + off
        srcs.append(np.stack([a, b], axis=1).reshape(-1))
        dsts.append(np.stack([b, a], axis=1).reshape(-1))
        if de:
            if g.num_edges and g.edge_x is None:
                raise GraphFormatError(f"graph {gi} lacks edge features")
            ex = g.edge_x if g.num_edges else np.zeros((0, de))
            exs.append(np.repeat(ex, 2, axis=0))
        xs.append(g.x)
        seg.append(np.full(g.num_nodes, gi, dtype=np.int64))
        ys.append(g.y)
        ms.append(g.mask)
        offsets.append(off + g.num_nodes)
    return BatchedGraph(
        x=np.concatenate(xs, axis=0),
        src=np.concatenate(srcs).astype(np.int64),
        dst=np.concatenate(dsts).astype(np.int64),
        edge_x=np.concatenate(exs, axis=0) if de else None,
        node_graph=np.concatenate(seg),
        node_offsets=np.array(offsets, dtype=np.int64),
        y=np.stack(ys),
        mask=np.stack(ms),
    )


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


def split_dataset(n: int, seed: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> DatasetSplit:
    """Random disjoint train/validation/test indices covering ``range(n)``."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    perm = stream(seed, "split").permutation(n)
    n_train = int(math.floor(round(ratios[0] * n, 9)))
    n_val = int(math.floor(round(ratios[1] * n, 9)))
    return DatasetSplit(
        train=tuple(sorted(perm[:n_train].tolist())),
        validation=tuple(sorted(perm[n_train:n_train + n_val].tolist())),
        test=tuple(sorted(perm[n_train + n_val:].tolist())),
    )


def subsample(indices: Sequence[int], fraction: float, seed: int) -> tuple[int, ...]:
    """Seeded nested subset: smaller fractions are subsets of larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    indices = sorted(indices)
    k = int(math.floor(round(fraction * len(indices), 9)))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(indices)} training graphs is empty")
    order = stream(seed, "subsample").permutation(len(indices))
    return tuple(sorted(indices[i] for i in order[:k]))
