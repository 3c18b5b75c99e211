"""GIN backbone, classifier head, model composition and edge-prediction pretraining."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import NoiseSource
from .graph import BatchedGraph, Graph, batch
from .numerics import (
    Adam,
    BatchNormState,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm,
    bce_with_logits_masked,
    gather_rows,
    matmul,
    mul,
    relu,
    row_sum,
    segment_sum,
)
from .rng import stream

log = logging.getLogger(__name__)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str, bias: bool = True):
        bound = 1.0 / np.sqrt(max(d_in, 1))
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects width {self.weight.shape[0]}, got {x.shape}")
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_state(self, prefix: str) -> dict:
        d = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            d[f"{prefix}.bias"] = self.bias
        return d


class GinLayer:
    """``MLP((1 + eps) h_i + sum_{j in N(i)} (h_j + edge_proj(e_ji)))`` plus its own BN."""

    def __init__(self, d: int, d_edge: int, rng: np.random.Generator, name: str):
        self.mlp1 = Linear(d, d, rng, f"{name}.mlp1")
        self.mlp2 = Linear(d, d, rng, f"{name}.mlp2")
        self.eps = Tensor(0.0, requires_grad=True, name=f"{name}.eps")
        self.edge_proj = Linear(d_edge, d, rng, f"{name}.edge_proj", bias=False) if d_edge else None
        self.bn = BatchNormState.fresh(d, name=f"{name}.bn")

    @property
    def width(self) -> int:
        return self.mlp1.weight.shape[0]

    def mlp(self, h: Tensor) -> Tensor:
        return self.mlp2(relu(self.mlp1(h)))

    def parameters(self) -> list[Tensor]:
        ps = self.mlp1.parameters() + self.mlp2.parameters() + [self.eps]
        if self.edge_proj is not None:
            ps += self.edge_proj.parameters()
        return ps + [self.bn.gamma, self.bn.beta]

    def named_state(self, prefix: str) -> dict:
        d = {**self.mlp1.named_state(f"{prefix}.mlp1"), **self.mlp2.named_state(f"{prefix}.mlp2"),
             f"{prefix}.eps": self.eps}
        if self.edge_proj is not None:
            d.update(self.edge_proj.named_state(f"{prefix}.edge_proj"))
        d[f"{prefix}.bn"] = self.bn
        return d


def gin_forward(layer: GinLayer, h: Tensor, batched: BatchedGraph) -> Tensor:
    if h.shape[0] != batched.num_nodes:
        raise ShapeError(f"gin_forward: {h.shape[0]} rows for {batched.num_nodes} nodes")
    if h.shape[1] != layer.width:
        raise ShapeError(f"gin_forward: width {h.shape[1]}, layer expects {layer.width}")
    msg = gather_rows(h, batched.src)
    if layer.edge_proj is not None and batched.src.size:
        if batched.edge_x is None:
            raise ShapeError("layer uses edge features but the batch has none")
        msg = add(msg, layer.edge_proj(Tensor(batched.edge_x)))
    agg = segment_sum(msg, batched.dst, batched.num_nodes)
    return layer.mlp(add(mul(h, add(1.0, layer.eps)), agg))


@dataclass
class BackboneConfig:
    d_in: int
    d_hidden: int = 300
    num_layers: int = 5
    d_edge: int = 0


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        if config.num_layers < 1:
            raise ValueError("backbone needs at least one layer")
        self.config = config
        rng = stream(seed, "init/backbone")
        d = config.d_hidden
        self.encoder = Linear(config.d_in, d, rng, "backbone.encoder")
        self.layers = [GinLayer(d, config.d_edge, rng, f"backbone.layers.{l}") for l in range(config.num_layers)]
        self.frozen = False

    @property
    def d_hidden(self) -> int:
        return self.config.d_hidden

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        ps = self.encoder.parameters()
        for layer in self.layers:
            ps += layer.parameters()
        return ps

    def bns(self) -> list[BatchNormState]:
        return [layer.bn for layer in self.layers]

    def named_state(self, prefix: str = "backbone") -> dict:
        d = self.encoder.named_state(f"{prefix}.encoder")
        for l, layer in enumerate(self.layers):
            d.update(layer.named_state(f"{prefix}.layers.{l}"))
        return d

    def set_mode(self, mode: str) -> None:
        if self.frozen:
            return
        for bn in self.bns():
            bn.mode = mode

    def unfreeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad = True
        self.frozen = False
        return self


def freeze(backbone: Backbone) -> Backbone:
    """Mark every backbone parameter non-trainable and pin BN to running stats."""
    for p in backbone.parameters():
        p.requires_grad = False
    for bn in backbone.bns():
        bn.mode = "eval"
    backbone.frozen = True
    return backbone


class ClassifierHead(Linear):
    def __init__(self, d: int, n_tasks: int, seed: int = 0):
        super().__init__(d, n_tasks, stream(seed, "init/head"), "head")


def node_states(backbone: Backbone, batched: BatchedGraph, adapters: Sequence | None = None,
                noise: NoiseSource | None = None) -> Tensor:
    """Final node representations after all layers (adapters optional)."""
    if adapters is not None and len(adapters) != backbone.num_layers:
        raise ValueError(f"{len(adapters)} adapters for {backbone.num_layers} layers")
    h = backbone.encoder(Tensor(batched.x))
    last = backbone.num_layers - 1
    for l, layer in enumerate(backbone.layers):
        y = gin_forward(layer, h, batched)
        if adapters is None:
            xhat = batchnorm(y, layer.bn)
        else:
            xhat = adapters[l].forward(h, y, noise)
        h = relu(xhat) if l < last else xhat
    return h


def mean_pool(h: Tensor, batched: BatchedGraph) -> Tensor:
    counts = batched.nodes_per_graph.astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
    return mul(segment_sum(h, batched.node_graph, batched.num_graphs), Tensor(inv))


def forward_pass(backbone: Backbone, head: ClassifierHead, adapters: Sequence | None,
                 batched: BatchedGraph, noise: NoiseSource | None = None) -> Tensor:
    """Graph-level logits, G x T."""
    if adapters is not None:
        for a in adapters:
            width = a.bn_y.gamma.shape[0]
            if width != backbone.d_hidden:
                raise ShapeError(f"adapter width {width} vs backbone width {backbone.d_hidden}")
    h = node_states(backbone, batched, adapters, noise)
    return head(mean_pool(h, batched))


# --------------------------------------------------------------------------
# Edge-prediction pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


def _sample_pairs(batched: BatchedGraph, graphs: Sequence[Graph], rng: np.random.Generator):
    """Positive (real) pairs and an equal number of uniformly drawn absent pairs."""
    pos_u, pos_v, neg_u, neg_v = [], [], [], []
    for gi, g in enumerate(graphs):
        off = int(batched.node_offsets[gi])
        n = g.num_nodes
        if g.num_edges == 0:
            continue
        pos_u.append(g.edges[:, 0] + off)
        pos_v.append(g.edges[:, 1] + off)
        adj = np.zeros((n, n), dtype=bool)
        adj[g.edges[:, 0], g.edges[:, 1]] = True
        adj[g.edges[:, 1], g.edges[:, 0]] = True
        iu, ju = np.triu_indices(n, k=1)
        free = ~adj[iu, ju]
        iu, ju = iu[free], ju[free]
        k = min(g.num_edges, iu.size)
        if k:
            pick = rng.choice(iu.size, size=k, replace=False)
            neg_u.append(iu[pick] + off)
            neg_v.append(ju[pick] + off)
    if not pos_u:
        return None
    u = np.concatenate(pos_u + neg_u)
    v = np.concatenate(pos_v + neg_v)
    n_pos = sum(a.size for a in pos_u)
    labels = np.zeros(u.size)
    labels[:n_pos] = 1.0
    return u, v, labels


def edge_scores(h: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
    return row_sum(mul(gather_rows(h, u), gather_rows(h, v)))


def pretrain_edgepred(backbone: Backbone, dataset: Sequence[Graph], config: PretrainConfig) -> Backbone:
    """Train the backbone to score real edges above random non-edges.

    The score of a pair is the dot product of final node states; the loss is
    binary cross-entropy over positives and an equal count of negatives.
    """
    usable = [g for g in dataset if g.num_nodes >= 2]
    if not dataset:
        raise ValueError("pretraining dataset is empty")
    if not usable:
        raise ValueError("no graph with at least two nodes to pretrain on")
    if backbone.frozen:
        raise ValueError("cannot pretrain a frozen backbone")
    opt = Adam(backbone.parameters(), lr=config.lr)
    shuffle_rng = stream(config.seed, "pretrain/shuffle")
    neg_rng = stream(config.seed, "pretrain/negatives")
    backbone.set_mode("train")
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(usable))
        total, steps = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            graphs = [usable[i] for i in order[start:start + config.batch_size]]
            batched = batch(graphs)
            if batched.num_nodes < 2:
                continue
            pairs = _sample_pairs(batched, graphs, neg_rng)
            if pairs is None:
                continue
            u, v, labels = pairs
            with Tape():
                h = node_states(backbone, batched)
                scores = edge_scores(h, u, v)
                loss = bce_with_logits_masked(scores, labels, np.ones_like(labels))
                grads = backward(loss)
            opt.step(grads)
            total += loss.item()
            steps += 1
        log.debug("pretrain epoch %d loss %.4f", epoch, total / max(steps, 1))
    backbone.set_mode("eval")
    return backbone


def edgepred_auc(backbone: Backbone, graphs: Sequence[Graph], seed: int = 0) -> float:
    """Held-out ROC-AUC of dot-product edge scores, BN in eval mode."""
    from .training import roc_auc

    usable = [g for g in graphs if g.num_nodes >= 2 and g.num_edges > 0]
    if not usable:
        raise ValueError("no graphs with edges to evaluate")
    saved = [bn.mode for bn in backbone.bns()]
    for bn in backbone.bns():
        bn.mode = "eval"
    try:
        batched = batch(usable)
        u, v, labels = _sample_pairs(batched, usable, stream(seed, "pretrain/eval"))
        h = node_states(backbone, batched)
        scores = edge_scores(h, u, v).data
    finally:
        for bn, m in zip(backbone.bns(), saved):
            bn.mode = m
    return roc_auc(scores.tolist(), labels.tolist())


def clone(obj):
    """Deep copy of a model component (parameters and BN states included)."""
    return copy.deepcopy(obj)
