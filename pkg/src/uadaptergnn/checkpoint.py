"""JSON checkpoints for backbones and fine-tuned adapters.

Layout::

    {
      "format": "uadaptergnn-checkpoint",
      "version": 1,
      "header": {...},                       # shapes, kind, frozen flag, ...
      "tensors": {name: {"shape": [...], "data": [row-major floats]}}
    }

Parameter names are dotted paths (``backbone.layers.0.mlp1.weight``). A
batch-norm state named ``X`` is stored as ``X.gamma``, ``X.beta``,
``X.running_mean`` and ``X.running_var``. Adapter and head tensors live
under the ``adapter.`` and ``head.`` namespaces. Floats are written with
Python's shortest round-trip repr, so a save/load cycle is lossless and
the bytes depend only on the values.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, freeze
from .numerics import BatchNormState, Tensor

FORMAT = "uadaptergnn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _flatten(named: dict) -> dict[str, np.ndarray]:
    flat = {}
    for name, obj in named.items():
        if isinstance(obj, Tensor):
            flat[name] = obj.data
        elif isinstance(obj, BatchNormState):
            flat[f"{name}.gamma"] = obj.gamma.data
            flat[f"{name}.beta"] = obj.beta.data
            flat[f"{name}.running_mean"] = obj.running_mean
            flat[f"{name}.running_var"] = obj.running_var
        else:
            raise TypeError(f"cannot serialize {name}: {type(obj).__name__}")
    return flat


def encode(header: dict, named: dict) -> str:
    tensors = {
        name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
        for name, arr in sorted(_flatten(named).items())
    }
    doc = {"format": FORMAT, "version": VERSION, "header": header, "tensors": tensors}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def write(path, header: dict, named: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(encode(header, named), encoding="utf-8")
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
    arrays = {name: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for name, t in doc["tensors"].items()}
    return doc["header"], arrays


def load_into(named: dict, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy stored arrays into the live tensors / BN states of ``named``."""
    expected = _flatten(named)
    missing = sorted(set(expected) - set(arrays))
    if missing and strict:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")
    for name, obj in named.items():
        def get(key):
            arr = arrays[key]
            if arr.shape != expected[key].shape:
                raise CheckpointError(f"{key}: stored shape {arr.shape}, model expects {expected[key].shape}")
            return arr.copy()

        if isinstance(obj, Tensor):
            obj.data = get(name)
        else:
            obj.gamma.data = get(f"{name}.gamma")
            obj.beta.data = get(f"{name}.beta")
            obj.running_mean = get(f"{name}.running_mean")
            obj.running_var = get(f"{name}.running_var")


def backbone_header(backbone: Backbone) -> dict:
    c = backbone.config
    return {"kind": "backbone", "d_in": c.d_in, "d_hidden": c.d_hidden, "num_layers": c.num_layers,
            "d_edge": c.d_edge, "frozen": backbone.frozen}


def save_backbone(backbone: Backbone, path) -> None:
    write(path, backbone_header(backbone), backbone.named_state("backbone"))


def load_backbone(path) -> Backbone:
    header, arrays = read(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    config = BackboneConfig(d_in=header["d_in"], d_hidden=header["d_hidden"],
                            num_layers=header["num_layers"], d_edge=header["d_edge"])
    bb = Backbone(config)
    load_into(bb.named_state("backbone"), arrays)
    for bn in bb.bns():
        bn.mode = "eval"
    if header.get("frozen"):
        freeze(bb)
    return bb


def model_header(model) -> dict:
    a0 = (model.adapters or [None])[0]
    header = {
        "kind": "finetuned",
        "adapter_kind": model.kind,
        "n_tasks": model.head.weight.shape[1],
        "backbone": backbone_header(model.backbone),
    }
    if a0 is not None:
        branch = getattr(a0, "mean_branch", None) or a0.branch
        header["d_mid"] = branch.w_down.shape[1]
        header["scale_mode"] = getattr(a0, "scale_mode", None)
    return header


def save_model(model, path) -> None:
    """Adapters and head only; a full fine-tune also stores its backbone copy."""
    named = model.named_state() if model.kind == "none" else model.adapter_named_state()
    write(path, model_header(model), named)


def load_model(path, backbone: Backbone):
    from .model import build_model

    header, arrays = read(path)
    if header.get("kind") != "finetuned":
        raise CheckpointError(f"{path}: not a fine-tuned model checkpoint")
    bh = header["backbone"]
    for key in ("d_in", "d_hidden", "num_layers", "d_edge"):
        if bh[key] != backbone_header(backbone)[key]:
            raise CheckpointError(f"{path}: backbone {key}={bh[key]} does not match the given backbone")
    model = build_model(backbone, header["n_tasks"], header["adapter_kind"], d_mid=header.get("d_mid", 1),
                        scale_mode=header.get("scale_mode") or "learnable")
    named = model.named_state() if model.kind == "none" else model.adapter_named_state()
    load_into(named, arrays)
    model.set_mode("eval")
    return model
