"""A backbone, its optional per-layer adapters and a classifier head, as one unit."""

from __future__ import annotations

from dataclasses import dataclass

from .adapter import AdapterSpec, GaussianAdapter, NoiseSource, build_adapters
from .backbone import Backbone, ClassifierHead, clone, forward_pass
from .graph import BatchedGraph
from .numerics import BatchNormState, Tensor

ADAPTER_KINDS = ("none", "deterministic", "gaussian")


@dataclass
class Model:
    backbone: Backbone
    head: ClassifierHead
    adapters: list | None
    kind: str

    def forward(self, batched: BatchedGraph, noise: NoiseSource | None = None) -> Tensor:
        return forward_pass(self.backbone, self.head, self.adapters, batched, noise)

    def bns(self) -> list[BatchNormState]:
        out = [] if self.backbone.frozen else self.backbone.bns()
        for a in self.adapters or []:
            out += a.bns()
        return out

    def set_mode(self, mode: str) -> None:
        for bn in self.bns():
            bn.mode = mode

    def trainable_parameters(self) -> list[Tensor]:
        params = [] if self.backbone.frozen else self.backbone.parameters()
        for a in self.adapters or []:
            params += a.parameters()
        params += self.head.parameters()
        return [p for p in params if p.requires_grad]

    def adapter_named_state(self) -> dict:
        state = {}
        for l, a in enumerate(self.adapters or []):
            state.update(a.named_state(f"adapter.{l}"))
        state.update(self.head.named_state("head"))
        return state

    def named_state(self) -> dict:
        return {**self.backbone.named_state("backbone"), **self.adapter_named_state()}

    def scales(self) -> list[float]:
        return [float(a.scale.data) for a in self.adapters or [] if isinstance(a, GaussianAdapter)]


def build_model(backbone: Backbone, n_tasks: int, kind: str, d_mid: int = 15, scale_mode: str = "learnable",
                scale_value: float = 0.01, seed: int = 0) -> Model:
    """Attach a fresh head (and adapters) to ``backbone``.

    ``kind='none'`` is full fine-tuning: it works on an unfrozen deep copy, so
    the caller's backbone is never modified. Adapter kinds share the frozen
    backbone and own a trainable copy of each layer's BN as ``BN_y``.
    """
    if kind not in ADAPTER_KINDS:
        raise ValueError(f"adapter kind must be one of {ADAPTER_KINDS}, got {kind!r}")
    head = ClassifierHead(backbone.d_hidden, n_tasks, seed)
    if kind == "none":
        bb = clone(backbone).unfreeze()
        model = Model(bb, head, None, kind)
    else:
        if not backbone.frozen:
            raise ValueError("adapter fine-tuning requires a frozen backbone; call freeze() first")
        bn_ys = [layer.bn.copy(trainable=True, name=f"adapter.{l}.bn_y") for l, layer in enumerate(backbone.layers)]
        for bn in bn_ys:
            bn.mode = "train"
        spec = AdapterSpec(kind, d_mid, scale_mode, scale_value)
        model = Model(backbone, head, build_adapters(spec, backbone.d_hidden, bn_ys, seed), kind)
    model.set_mode("train")
    return model


def expected_trainable_count(kind: str, num_layers: int, d: int, d_mid: int, n_tasks: int,
                             scale_mode: str = "learnable", backbone_count: int = 0) -> int:
    """Closed-form trainable parameter count for a given model shape."""
    head = d * n_tasks + n_tasks
    branch = 2 * d * d_mid + 2 * d          # down, up, BN affine
    bn_y = 2 * d
    if kind == "gaussian":
        per_layer = 2 * branch + bn_y + (1 if scale_mode == "learnable" else 0)
        return num_layers * per_layer + head
    if kind == "deterministic":
        return num_layers * (branch + bn_y) + head
    return backbone_count + head
