"""Fine-tuning, evaluation metrics and the experiment protocols.

Protocols:

* :func:`robustness_sweep`  - test AUC under random edge deletion/addition
* :func:`generalization_track` - per-epoch validation-minus-train loss gap
* :func:`scaling_ablation`  - learnable adapter scale vs fixed values
* :func:`size_sweep`, :func:`bottleneck_sweep` - training fraction and d_mid grids
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import astuple, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapter import NoiseSource
from .backbone import Backbone
from .graph import DatasetSplit, Graph, batch, perturb, subsample
from .model import ADAPTER_KINDS, Model, build_model
from .numerics import Adam, Tape, Tensor, backward, bce_with_logits_masked, stack_mean
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

ROBUSTNESS_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8)
PERTURB_KINDS = ("delete", "add")
FIXED_SCALES = (0.01, 0.1, 0.5, 1.0, 5.0)
BOTTLENECK_DIMS = (15, 20, 30)
EVAL_CHUNK = 256

RUN_HEADER = ["epoch", "train_loss", "val_loss", "gap", "test_auc"]
SWEEP_HEADER = ["axis", "value", "mean_auc", "std_auc", "n_seeds"]


@dataclass
class FineTuneConfig:
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 32
    d_mid: int = 15
    samples: int = 1                 # K noise draws per batch, losses averaged
    scale_mode: str = "learnable"
    scale_value: float = 0.01        # initial value when learnable, the constant when fixed
    adapter_kind: str = "gaussian"
    noise_mode: str = "sample"
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.d_mid < 1 or self.samples < 1:
            raise ValueError("d_mid and samples must be >= 1")
        if self.scale_mode not in ("learnable", "fixed"):
            raise ValueError(f"scale_mode must be 'learnable' or 'fixed', got {self.scale_mode!r}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter_kind must be one of {ADAPTER_KINDS}")
        if self.noise_mode not in ("sample", "zero"):
            raise ValueError(f"noise_mode must be 'sample' or 'zero'")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    # average rank over each run of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(logits: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, list[float | None]]:
    """Mean AUC over tasks with both classes observed; skipped tasks give None."""
    per_task: list[float | None] = []
    for t in range(y.shape[1]):
        obs = mask[:, t] > 0
        yt = y[obs, t]
        if yt.size == 0 or yt.min() == yt.max():
            per_task.append(None)
            continue
        per_task.append(roc_auc(logits[obs, t], yt.astype(int)))
    valid = [a for a in per_task if a is not None]
    return (float(np.mean(valid)) if valid else float("nan")), per_task


def predict(model: Model, graphs: Sequence[Graph]) -> np.ndarray:
    """Eval-mode logits on the deterministic mean path, G x T."""
    model.set_mode("eval")
    noise = NoiseSource.zero()
    out = [model.forward(batch(graphs[i:i + EVAL_CHUNK]), noise).data for i in range(0, len(graphs), EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


@dataclass
class Evaluation:
    loss: float
    auc: float
    per_task: list


def evaluate(model: Model, graphs: Sequence[Graph]) -> Evaluation:
    logits = predict(model, graphs)
    y = np.stack([g.y for g in graphs])
    mask = np.stack([g.mask for g in graphs])
    loss = bce_with_logits_masked(Tensor(logits), y, mask).item() if mask.sum() else float("nan")
    auc, per_task = macro_auc(logits, y, mask)
    return Evaluation(loss, auc, per_task)


# --------------------------------------------------------------------------
# Run records
# --------------------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    gap: float
    test_auc: float
    val_auc: float
    test_auc_per_task: list


@dataclass
class RunRecord:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int | None = None
    final_test_auc: float = float("nan")
    final_test_auc_per_task: list = field(default_factory=list)
    final_scales: list[float] = field(default_factory=list)
    trainable_count: int = 0

    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.gap), repr(r.test_auc)])
        return buf.getvalue()


def _trainable_state(model: Model) -> dict:
    # a frozen backbone never changes, so only adapters and head need saving
    return model.named_state() if model.kind == "none" else model.adapter_named_state()


def _snapshot(model: Model) -> dict:
    snap = {}
    for name, obj in _trainable_state(model).items():
        if hasattr(obj, "running_mean"):
            snap[name] = (obj.gamma.data.copy(), obj.beta.data.copy(), obj.running_mean.copy(), obj.running_var.copy())
        else:
            snap[name] = obj.data.copy()
    return snap


def _restore(model: Model, snap: dict) -> None:
    for name, obj in _trainable_state(model).items():
        v = snap[name]
        if hasattr(obj, "running_mean"):
            obj.gamma.data, obj.beta.data, obj.running_mean, obj.running_var = (a.copy() for a in v)
        else:
            obj.data = v.copy()


def finetune(backbone: Backbone, config: FineTuneConfig, dataset: Sequence[Graph],
             split: DatasetSplit) -> tuple[Model, RunRecord]:
    """Train adapters and head (or everything, for ``adapter_kind='none'``).

    Each epoch shuffles the training set with the run seed, takes Adam steps
    on masked BCE (averaged over ``samples`` noise draws), then records
    eval-mode losses on the train and validation sets and test ROC-AUC.
    The returned model holds the parameters of the best-validation-AUC
    epoch, and ``record.final_test_auc`` is its test AUC.
    """
    config.validate()
    if not split.train:
        raise ValueError("training split is empty")
    if config.adapter_kind != "none" and not backbone.frozen:
        raise ValueError("refusing to fine-tune adapters on an unfrozen backbone")
    train = [dataset[i] for i in split.train]
    val = [dataset[i] for i in split.validation]
    test = [dataset[i] for i in split.test]
    n_tasks = train[0].num_tasks

    model = build_model(backbone, n_tasks, config.adapter_kind, config.d_mid, config.scale_mode,
                        config.scale_value, config.seed)
    params = model.trainable_parameters()
    opt = Adam(params, lr=config.lr)
    noise = NoiseSource(derive_seed(config.seed, "noise"), config.noise_mode)
    shuffle = stream(config.seed, "shuffle")
    record = RunRecord(trainable_count=sum(p.data.size for p in params))

    best_key, best_snap = -math.inf, None
    for epoch in range(config.epochs):
        model.set_mode("train")
        order = shuffle.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            b = batch([train[i] for i in order[start:start + config.batch_size]])
            if b.num_nodes < 2 or b.mask.sum() == 0:
                continue
            with Tape():
                losses = [bce_with_logits_masked(model.forward(b, noise), b.y, b.mask) for _ in range(config.samples)]
                loss = losses[0] if len(losses) == 1 else stack_mean(losses)
                grads = backward(loss)
            opt.step(grads)

        tr = evaluate(model, train)
        va = evaluate(model, val) if val else Evaluation(float("nan"), float("nan"), [])
        te = evaluate(model, test) if test else Evaluation(float("nan"), float("nan"), [])
        record.rows.append(EpochRow(epoch + 1, tr.loss, va.loss, va.loss - tr.loss, te.auc, va.auc, te.per_task))
        key = va.auc if math.isfinite(va.auc) else -math.inf
        if best_snap is None or key > best_key:
            best_key, best_snap, record.best_epoch = key, _snapshot(model), epoch + 1
        log.debug("epoch %d train %.4f val %.4f test_auc %.4f", epoch + 1, tr.loss, va.loss, te.auc)

    if best_snap is not None:
        _restore(model, best_snap)
    model.set_mode("eval")
    if test:
        te = evaluate(model, test)
        record.final_test_auc, record.final_test_auc_per_task = te.auc, te.per_task
    record.final_scales = model.scales()
    return model, record


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    axis: str
    value: object
    per_seed: list[float]
    details: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed, ddof=1)) if len(self.per_seed) > 1 else 0.0


@dataclass
class SweepResult:
    rows: list[SweepRow]
    seeds: list[int]

    def row(self, axis: str, value) -> SweepRow:
        for r in self.rows:
            if r.axis == axis and r.value == value:
                return r
        raise KeyError((axis, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([r.axis, r.value, repr(r.mean), repr(r.std), len(r.per_seed)])
        return buf.getvalue()


def robustness_sweep(models: Sequence[Model], test_graphs: Sequence[Graph], seeds: Sequence[int],
                     levels: Sequence[float] = ROBUSTNESS_LEVELS,
                     kinds: Sequence[str] = PERTURB_KINDS) -> SweepResult:
    """Test AUC of each clean-trained model on perturbed copies of the test set.

    ``models[i]`` is paired with ``seeds[i]``; the perturbation stream is
    drawn from that seed, so every seed sees its own noisy test set.
    """
    if len(models) != len(seeds):
        raise ValueError(f"{len(models)} models for {len(seeds)} seeds")
    rows = []
    for kind in kinds:
        for level in levels:
            aucs = []
            for model, seed in zip(models, seeds):
                rng = stream(seed, f"perturb/{kind}/{level!r}")
                noisy = [perturb(g, kind, level, rng) for g in test_graphs]
                aucs.append(evaluate(model, noisy).auc)
            rows.append(SweepRow(kind, level, aucs))
    return SweepResult(rows, list(seeds))


@dataclass
class GapComparison:
    epochs: list[int]
    gaps_a: np.ndarray        # seeds x epochs
    gaps_b: np.ndarray
    label_a: str
    label_b: str
    last: int

    @property
    def late_mean_a(self) -> float:
        return float(self.gaps_a[:, -self.last:].mean())

    @property
    def late_mean_b(self) -> float:
        return float(self.gaps_b[:, -self.last:].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", f"gap_{self.label_a}", f"gap_{self.label_b}", "difference"])
        ma, mb = self.gaps_a.mean(axis=0), self.gaps_b.mean(axis=0)
        for e, a, b in zip(self.epochs, ma, mb):
            w.writerow([e, repr(float(a)), repr(float(b)), repr(float(a - b))])
        w.writerow([f"late_mean_{self.last}", repr(self.late_mean_a), repr(self.late_mean_b),
                    repr(self.late_mean_a - self.late_mean_b)])
        return buf.getvalue()


def generalization_track(records_a: Sequence[RunRecord], records_b: Sequence[RunRecord], last: int = 20,
                         label_a: str = "gaussian", label_b: str = "deterministic") -> GapComparison:
    """Per-epoch validation-minus-train gaps for two variants, averaged over seeds."""
    if len(records_a) != len(records_b) or not records_a:
        raise ValueError("need the same non-zero number of runs for both variants")
    lengths = {len(r.rows) for r in list(records_a) + list(records_b)}
    if len(lengths) != 1:
        raise ValueError(f"mismatched epoch counts {sorted(lengths)}")
    n = lengths.pop()
    if n == 0:
        raise ValueError("runs have no epochs")
    ga = np.stack([r.gaps() for r in records_a])
    gb = np.stack([r.gaps() for r in records_b])
    return GapComparison(list(range(1, n + 1)), ga, gb, label_a, label_b, min(last, n))


def run_key(config: FineTuneConfig, split: DatasetSplit) -> tuple:
    """Cache key identifying one fine-tuning run on a fixed backbone and dataset."""
    return astuple(config), split


def _grid(backbone, dataset, split, seeds, configs: list[tuple[str, object, FineTuneConfig, DatasetSplit]],
          cache: dict | None = None):
    rows = []
    for axis, value, cfg, sp in configs:
        aucs, scales = [], []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            key = run_key(run_cfg, sp)
            if cache is not None and key in cache:
                rec = cache[key]
            else:
                _, rec = finetune(backbone, run_cfg, dataset, sp)
                if cache is not None:
                    cache[key] = rec
            aucs.append(rec.final_test_auc)
            scales.append(rec.final_scales)
        rows.append(SweepRow(axis, value, aucs, {"final_scales": scales}))
    return SweepResult(rows, list(seeds))


def scaling_ablation(backbone: Backbone, config: FineTuneConfig, dataset: Sequence[Graph], split: DatasetSplit,
                     seeds: Sequence[int], fixed_values: Sequence[float] = FIXED_SCALES,
                     cache: dict | None = None) -> SweepResult:
    """One Gaussian-adapter run per fixed scale plus one learnable run, per seed.

    ``cache`` maps :func:`run_key` to finished :class:`RunRecord` objects and
    is filled as runs complete, so grids sharing runs can skip them.
    """
    base = replace(config, adapter_kind="gaussian")
    configs = [("scale", "learnable", replace(base, scale_mode="learnable", scale_value=0.01), split)]
    configs += [("scale", float(v), replace(base, scale_mode="fixed", scale_value=float(v)), split)
                for v in fixed_values]
    return _grid(backbone, dataset, split, seeds, configs, cache)


def size_sweep(backbone: Backbone, config: FineTuneConfig, dataset: Sequence[Graph], split: DatasetSplit,
               seeds: Sequence[int], fractions: Sequence[float], cache: dict | None = None) -> SweepResult:
    """Train on nested seeded subsets of the training split."""
    configs = []
    for f in fractions:
        sub = split if f == 1.0 else DatasetSplit(subsample(split.train, f, config.seed), split.validation, split.test)
        configs.append(("train_fraction", float(f), config, sub))
    return _grid(backbone, dataset, split, seeds, configs, cache)


def bottleneck_sweep(backbone: Backbone, config: FineTuneConfig, dataset: Sequence[Graph], split: DatasetSplit,
                     seeds: Sequence[int], d_mids: Sequence[int] = BOTTLENECK_DIMS,
                     cache: dict | None = None) -> SweepResult:
    configs = [("d_mid", int(m), replace(config, d_mid=int(m)), split) for m in d_mids]
    return _grid(backbone, dataset, split, seeds, configs, cache)
