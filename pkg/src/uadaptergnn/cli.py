"""Command-line entry point.

Every command writes its artifacts plus a ``*.manifest.json`` holding the
resolved configuration. Passing that manifest back through ``--config``
reproduces the artifacts byte for byte; explicit flags override it.

    uadaptergnn gen-data --out data.jsonl
    uadaptergnn pretrain --data data.jsonl --out backbone.json
    uadaptergnn finetune --data data.jsonl --backbone backbone.json --out run/
    uadaptergnn sweep robustness --data data.jsonl --backbone backbone.json --out sweeps/
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .adapter import NoiseSource
from .backbone import Backbone, BackboneConfig, PretrainConfig, freeze, pretrain_edgepred
from .graph import GraphFormatError, batch, generate_synthetic, load_jsonl, perturb, save_jsonl, split_dataset
from .model import build_model
from .numerics import Tape, backward, bce_with_logits_masked, relative_error
from .rng import stream
from .training import (
    BOTTLENECK_DIMS,
    FIXED_SCALES,
    PERTURB_KINDS,
    ROBUSTNESS_LEVELS,
    FineTuneConfig,
    bottleneck_sweep,
    evaluate,
    finetune,
    generalization_track,
    robustness_sweep,
    scaling_ablation,
    size_sweep,
)

log = logging.getLogger("uadaptergnn")

SWEEP_AXES = ("robustness", "scaling", "bottleneck", "size", "generalization")
GRADCHECK_TOL = 1e-4

# Defaults per command; a --config file and then explicit flags override these.
DEFAULTS = {
    "gen-data": dict(seed=0, n_graphs=600, d_in=8, n_tasks=2, min_nodes=8, max_nodes=20, edge_prob=0.2,
                     edge_dim=3, missing_rate=0.1, rule="degree_weighted"),
    "pretrain": dict(seed=0, d_hidden=300, layers=5, epochs=20, lr=1e-3, batch_size=32),
    "finetune": dict(seed=0, split_seed=0, adapter="gaussian", scale="learnable", scale_value=0.01, d_mid=15,
                     samples=1, lr=1e-3, epochs=100, batch_size=32, noise="sample"),
    "eval": dict(seed=0, split_seed=0, subset="test", perturb="none", level=0.0),
    "sweep": dict(seed=0, split_seed=0, n_seeds=5, adapter="gaussian", scale="learnable", scale_value=0.01,
                  d_mid=15, samples=1, lr=1e-3, epochs=100, batch_size=32, noise="sample", grid=None,
                  last=20),
    "gradcheck": dict(seed=0, d_hidden=8, layers=2, d_mid=3, graphs=3, adapter="gaussian", step=1e-5,
                      corrupt=None),
}
PATH_KEYS = ("data", "out", "backbone", "model")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Argument parsing and config resolution
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, paths: tuple[str, ...]) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="root seed (default 0)")
    p.add_argument("--config", default=None, help="JSON config or manifest; explicit flags override it")
    for name in paths:
        p.add_argument(f"--{name}", default=S)


def _finetune_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--split-seed", type=int, default=S)
    p.add_argument("--adapter", choices=("none", "deterministic", "gaussian"), default=S)
    p.add_argument("--scale", choices=("learnable", "fixed"), default=S)
    p.add_argument("--scale-value", type=float, default=S, help="initial s if learnable, constant if fixed")
    p.add_argument("--d-mid", type=int, default=S)
    p.add_argument("--samples", type=int, default=S, help="noise draws K per step")
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--noise", choices=("sample", "zero"), default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="uadaptergnn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic planted-rule dataset as JSONL")
    _common(p, ("out",))
    p.add_argument("--n-graphs", type=int, default=S)
    p.add_argument("--d-in", type=int, default=S)
    p.add_argument("--n-tasks", type=int, default=S)
    p.add_argument("--min-nodes", type=int, default=S)
    p.add_argument("--max-nodes", type=int, default=S)
    p.add_argument("--edge-prob", type=float, default=S)
    p.add_argument("--edge-dim", type=int, default=S)
    p.add_argument("--missing-rate", type=float, default=S)
    p.add_argument("--rule", choices=("degree_weighted", "node_mean"), default=S)

    p = sub.add_parser("pretrain", help="edge-prediction pretraining; writes a frozen backbone")
    _common(p, ("data", "out"))
    p.add_argument("--d-hidden", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)

    p = sub.add_parser("finetune", help="fine-tune adapters and head on a frozen backbone")
    _common(p, ("data", "backbone", "out"))
    _finetune_flags(p)

    p = sub.add_parser("eval", help="ROC-AUC of a fine-tuned model, optionally on perturbed graphs")
    _common(p, ("data", "backbone", "model", "out"))
    p.add_argument("--split-seed", type=int, default=S)
    p.add_argument("--subset", choices=("all", "train", "validation", "test"), default=S)
    p.add_argument("--perturb", choices=("none",) + PERTURB_KINDS, default=S)
    p.add_argument("--level", type=float, default=S)

    p = sub.add_parser("sweep", help="multi-seed experiment grids")
    p.add_argument("axis", choices=SWEEP_AXES)
    _common(p, ("data", "backbone", "out"))
    _finetune_flags(p)
    p.add_argument("--n-seeds", type=int, default=S, help="seeds are seed, seed+1, ...")
    p.add_argument("--grid", default=S, help="comma-separated grid values for the chosen axis")
    p.add_argument("--last", type=int, default=S, help="late-epoch window for the gap summary")

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable parameter group")
    _common(p, ("out",))
    p.add_argument("--d-hidden", type=int, default=S)
    p.add_argument("--layers", type=int, default=S)
    p.add_argument("--d-mid", type=int, default=S)
    p.add_argument("--graphs", type=int, default=S)
    p.add_argument("--adapter", choices=("none", "deterministic", "gaussian"), default=S)
    p.add_argument("--step", type=float, default=S)
    p.add_argument("--corrupt", default=S, help=argparse.SUPPRESS)  # negative control: perturb one group
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.command == "sweep":
        cfg["axis"] = args.axis
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]
        allowed = set(cfg) | set(PATH_KEYS)
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise UsageError(f"{args.config}: unknown config keys {unknown}")
        cfg.update(doc)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "axis")}
    cfg.update(flags)
    if args.command == "sweep" and cfg["axis"] != args.axis:
        raise UsageError(f"config is for sweep {cfg['axis']!r}, not {args.axis!r}")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required " + ", ".join(f"--{k}" for k in missing))


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(path: Path, command: str, cfg: dict, outputs: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {k: cfg[k] for k in ("data", "backbone", "model") if cfg.get(k)},
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    write_json(path, manifest)


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _load(cfg: dict):
    graphs = load_jsonl(cfg["data"])
    if not graphs:
        raise UsageError(f"{cfg['data']}: dataset is empty")
    return graphs


def _ft_config(cfg: dict, seed: int | None = None) -> FineTuneConfig:
    return FineTuneConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], d_mid=cfg["d_mid"],
                          samples=cfg["samples"], scale_mode=cfg["scale"], scale_value=cfg["scale_value"],
                          adapter_kind=cfg["adapter"], noise_mode=cfg["noise"],
                          seed=cfg["seed"] if seed is None else seed)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> list[Path]:
    _require(cfg, "out")
    graphs = generate_synthetic(cfg["seed"], cfg["n_graphs"], (cfg["min_nodes"], cfg["max_nodes"]), cfg["d_in"],
                                cfg["n_tasks"], cfg["rule"], cfg["edge_prob"], cfg["edge_dim"], cfg["missing_rate"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(graphs, out)
    load_jsonl(out)  # post-condition: the file validates
    print(f"wrote {len(graphs)} graphs to {out}")
    return [out]


def cmd_pretrain(cfg: dict) -> list[Path]:
    _require(cfg, "data", "out")
    graphs = _load(cfg)
    widths = {g.edge_x.shape[1] for g in graphs if g.num_edges}
    d_edge = widths.pop() if widths else 0
    bb = Backbone(BackboneConfig(graphs[0].x.shape[1], cfg["d_hidden"], cfg["layers"], d_edge), cfg["seed"])
    if cfg["epochs"] > 0:
        pretrain_edgepred(bb, graphs, PretrainConfig(cfg["epochs"], cfg["lr"], cfg["batch_size"], cfg["seed"]))
    freeze(bb)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_backbone(bb, out)
    print(f"wrote frozen backbone to {out}")
    return [out]


def cmd_finetune(cfg: dict) -> list[Path]:
    _require(cfg, "data", "backbone", "out")
    graphs = _load(cfg)
    backbone = checkpoint.load_backbone(cfg["backbone"])
    split = split_dataset(len(graphs), cfg["split_seed"])
    model, record = finetune(backbone, _ft_config(cfg), graphs, split)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_model(model, out / "model.json")
    write_text(out / "run.csv", record.to_csv())
    summary = {"best_epoch": record.best_epoch, "final_test_auc": record.final_test_auc,
               "final_test_auc_per_task": record.final_test_auc_per_task, "final_scales": record.final_scales,
               "trainable_count": record.trainable_count}
    write_json(out / "summary.json", summary)
    print(f"best epoch {record.best_epoch}, test AUC {record.final_test_auc:.4f}")
    return [out / "model.json", out / "run.csv", out / "summary.json"]


def cmd_eval(cfg: dict) -> list[Path]:
    _require(cfg, "data", "backbone", "model", "out")
    graphs = _load(cfg)
    backbone = checkpoint.load_backbone(cfg["backbone"])
    model = checkpoint.load_model(cfg["model"], backbone)
    if cfg["subset"] == "all":
        subset = graphs
    else:
        idx = getattr(split_dataset(len(graphs), cfg["split_seed"]), cfg["subset"])
        subset = [graphs[i] for i in idx]
    if cfg["perturb"] != "none":
        rng = stream(cfg["seed"], f"perturb/eval/{cfg['perturb']}")
        subset = [perturb(g, cfg["perturb"], cfg["level"], rng) for g in subset]
    ev = evaluate(model, subset)
    result = {"n_graphs": len(subset), "loss": ev.loss, "auc": ev.auc, "auc_per_task": ev.per_task}
    out = Path(cfg["out"])
    write_json(out, result)
    print(f"AUC {ev.auc:.4f} on {len(subset)} graphs")
    return [out]


def _grid(cfg: dict, default, cast):
    if cfg.get("grid") in (None, ""):
        return list(default)
    return [cast(v) for v in str(cfg["grid"]).split(",")]


def cmd_sweep(cfg: dict) -> list[Path]:
    _require(cfg, "data", "backbone", "out")
    graphs = _load(cfg)
    backbone = checkpoint.load_backbone(cfg["backbone"])
    split = split_dataset(len(graphs), cfg["split_seed"])
    seeds = [cfg["seed"] + i for i in range(cfg["n_seeds"])]
    if not seeds:
        raise UsageError("--n-seeds must be at least 1")
    base = _ft_config(cfg)
    axis = cfg["axis"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if axis == "robustness":
        levels = _grid(cfg, ROBUSTNESS_LEVELS, float)
        models = [finetune(backbone, replace(base, seed=s), graphs, split)[0] for s in seeds]
        res = robustness_sweep(models, [graphs[i] for i in split.test], seeds, levels)
    elif axis == "scaling":
        res = scaling_ablation(backbone, base, graphs, split, seeds, _grid(cfg, FIXED_SCALES, float))
        scales = {str(r.value): r.details["final_scales"] for r in res.rows}
        write_json(out / "scaling_final_scales.json", scales)
        written.append(out / "scaling_final_scales.json")
    elif axis == "bottleneck":
        res = bottleneck_sweep(backbone, base, graphs, split, seeds, _grid(cfg, BOTTLENECK_DIMS, int))
    elif axis == "size":
        res = size_sweep(backbone, base, graphs, split, seeds, _grid(cfg, (0.2, 0.4, 0.6, 0.8, 1.0), float))
    else:
        ga = [finetune(backbone, replace(base, adapter_kind="gaussian", seed=s), graphs, split)[1] for s in seeds]
        gb = [finetune(backbone, replace(base, adapter_kind="deterministic", seed=s), graphs, split)[1]
              for s in seeds]
        cmp = generalization_track(ga, gb, cfg["last"])
        path = out / "generalization.csv"
        write_text(path, cmp.to_csv())
        print(f"late gap: gaussian {cmp.late_mean_a:.4f}, deterministic {cmp.late_mean_b:.4f}")
        return written + [path]

    path = out / f"{axis}.csv"
    write_text(path, res.to_csv())
    for r in res.rows:
        print(f"{r.axis}={r.value}: {r.mean:.4f} +- {r.std:.4f}")
    return written + [path]


def _gradcheck_graphs(seed: int, n: int, d_in: int, d_edge: int):
    return generate_synthetic(seed, n, (3, 6), d_in, 2, edge_prob=0.5, edge_dim=d_edge, missing_rate=0.0)


def run_gradcheck(cfg: dict) -> dict:
    """Tape gradients vs central differences for every trainable tensor."""
    d_in, d_edge = 4, 2
    graphs = _gradcheck_graphs(cfg["seed"], cfg["graphs"], d_in, d_edge)
    bb = Backbone(BackboneConfig(d_in, cfg["d_hidden"], cfg["layers"], d_edge), cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    for bn in bb.bns():  # non-trivial running statistics
        bn.running_mean = rng.standard_normal(bn.running_mean.shape) * 0.1
        bn.running_var = rng.uniform(0.5, 2.0, bn.running_var.shape)
    if cfg["adapter"] != "none":
        freeze(bb)
    model = build_model(bb, 2, cfg["adapter"], cfg["d_mid"], "learnable", 0.5, cfg["seed"])
    b = batch(graphs)
    noise_seed = cfg["seed"] + 1

    def loss():
        return bce_with_logits_masked(model.forward(b, NoiseSource(noise_seed)), b.y, b.mask)

    with Tape():
        grads = backward(loss())
    groups = {}
    for p in model.trainable_parameters():
        analytic = grads.get(p, np.zeros_like(p.data))
        if cfg.get("corrupt") and cfg["corrupt"] in p.name:
            analytic = analytic + 1e-2
        numeric = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + cfg["step"]
            up = loss().item()
            flat[i] = orig - cfg["step"]
            down = loss().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * cfg["step"])
        groups[p.name] = relative_error(analytic, numeric)
    worst = max(groups.values())
    return {"groups": groups, "max_rel_error": worst, "tolerance": GRADCHECK_TOL, "passed": worst < GRADCHECK_TOL}


def cmd_gradcheck(cfg: dict) -> list[Path]:
    report = run_gradcheck(cfg)
    width = max(len(k) for k in report["groups"])
    for name, err in report["groups"].items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < GRADCHECK_TOL else 'FAIL'}")
    print(f"max relative error {report['max_rel_error']:.3e}: {'PASS' if report['passed'] else 'FAIL'}")
    written = []
    if cfg.get("out"):
        out = Path(cfg["out"])
        write_json(out, report)
        written.append(out)
    if not report["passed"]:
        raise CheckFailed(written)
    return written


class CheckFailed(Exception):
    def __init__(self, written):
        super().__init__("gradient check failed")
        self.written = written


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    status = 0
    try:
        cfg = resolve(args)
        try:
            outputs = COMMANDS[args.command](cfg)
        except CheckFailed as exc:
            outputs, status = exc.written, 1
    except UsageError as exc:
        parser.error(str(exc))
    except (GraphFormatError, checkpoint.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if outputs:
        write_manifest(manifest_path(Path(cfg["out"])), args.command, cfg, outputs, started)
    return status


if __name__ == "__main__":
    sys.exit(main())
