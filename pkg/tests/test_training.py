import csv
import io
import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uadaptergnn.backbone import Backbone, BackboneConfig
from uadaptergnn.graph import DatasetSplit, split_dataset
from uadaptergnn.model import expected_trainable_count
from uadaptergnn.training import (
    RUN_HEADER,
    SWEEP_HEADER,
    FineTuneConfig,
    RunRecord,
    bottleneck_sweep,
    evaluate,
    finetune,
    generalization_track,
    macro_auc,
    robustness_sweep,
    roc_auc,
    scaling_ablation,
    size_sweep,
)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def quick(**kw):
    return FineTuneConfig(**{"epochs": 3, "batch_size": 16, "d_mid": 3, **kw})


@pytest.fixture
def small_split(synthetic_small):
    return split_dataset(len(synthetic_small), 0)


# ---- ROC-AUC ----------------------------------------------------------------

def test_auc_worked_example():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75


def test_auc_all_ties_is_half():
    assert roc_auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_perfect_and_reversed():
    assert roc_auc([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0, 1, 2, 3], [1, 1, 0, 0]) == 0.0


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_counting_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.standard_normal(n), 1)  # coarse grid forces ties
        assert abs(roc_auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.booleans()), min_size=2, max_size=25))
def test_auc_invariant_under_monotone_transform(pairs):
    scores = np.array([s for s, _ in pairs], dtype=float)
    labels = np.array([int(y) for _, y in pairs])
    if labels.min() == labels.max():
        return
    assert roc_auc(scores, labels) == roc_auc(np.exp(scores) * 3 + 1, labels)


def test_macro_auc_skips_single_class_task():
    logits = np.array([[0.9, 0.1], [0.2, 0.3], [0.7, 0.5]])
    y = np.array([[1, 1], [0, 1], [1, 1]])
    mask = np.ones_like(y)
    auc, per_task = macro_auc(logits, y, mask)
    assert per_task[1] is None and auc == per_task[0] == 1.0


# ---- fine-tuning ------------------------------------------------------------

def test_config_validation():
    for bad in (dict(lr=0), dict(epochs=-1), dict(d_mid=0), dict(samples=0), dict(scale_mode="x"),
                dict(adapter_kind="lora"), dict(noise_mode="x"), dict(seed=-1)):
        with pytest.raises(ValueError):
            FineTuneConfig(**bad).validate()


def test_zero_epochs_returns_initialized_model(small_frozen, synthetic_small, small_split):
    model, rec = finetune(small_frozen, quick(epochs=0), synthetic_small, small_split)
    assert rec.rows == [] and rec.best_epoch is None
    assert model.scales() == [0.01, 0.01]


def test_refuses_unfrozen_backbone(synthetic_small, small_split):
    bb = Backbone(BackboneConfig(d_in=4, d_hidden=8, num_layers=2, d_edge=3))
    with pytest.raises(ValueError, match="unfrozen"):
        finetune(bb, quick(), synthetic_small, small_split)


def test_empty_train_split(small_frozen, synthetic_small):
    with pytest.raises(ValueError):
        finetune(small_frozen, quick(), synthetic_small, DatasetSplit((), (0,), (1,)))


def test_full_finetune_trains_backbone_copy(small_frozen, synthetic_small, small_split):
    before = {k: v.data.copy() for k, v in small_frozen.named_state().items() if hasattr(v, "data")}
    model, rec = finetune(small_frozen, quick(adapter_kind="none"), synthetic_small, small_split)
    changed = any(not np.array_equal(before[k], v.data)
                  for k, v in model.backbone.named_state().items() if hasattr(v, "data"))
    assert changed
    for k, v in small_frozen.named_state().items():
        if hasattr(v, "data"):
            np.testing.assert_array_equal(before[k], v.data)
    assert rec.trainable_count == sum(p.data.size for p in model.backbone.parameters()) + 8 * 2 + 2


def test_seed_determinism(small_frozen, synthetic_small, small_split):
    _, a = finetune(small_frozen, quick(seed=3), synthetic_small, small_split)
    _, b = finetune(small_frozen, quick(seed=3), synthetic_small, small_split)
    _, c = finetune(small_frozen, quick(seed=4), synthetic_small, small_split)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


@pytest.mark.parametrize("kind, mode", [("gaussian", "learnable"), ("gaussian", "fixed"), ("deterministic", "learnable")])
def test_trainable_count_closed_form(small_frozen, synthetic_small, small_split, kind, mode):
    _, rec = finetune(small_frozen, quick(epochs=0, adapter_kind=kind, scale_mode=mode), synthetic_small, small_split)
    assert rec.trainable_count == expected_trainable_count(kind, 2, 8, 3, 2, mode)


def test_zero_noise_unit_scale_matches_deterministic_trajectory(small_frozen, synthetic_small, small_split):
    _, det = finetune(small_frozen, quick(adapter_kind="deterministic"), synthetic_small, small_split)
    _, gau = finetune(small_frozen, quick(adapter_kind="gaussian", noise_mode="zero", scale_mode="fixed",
                                          scale_value=1.0), synthetic_small, small_split)
    a = np.array([[r.train_loss, r.val_loss] for r in det.rows])
    b = np.array([[r.train_loss, r.val_loss] for r in gau.rows])
    assert np.abs(a - b).max() <= 1e-10


def test_gap_column_is_val_minus_train(small_frozen, synthetic_small, small_split):
    _, rec = finetune(small_frozen, quick(), synthetic_small, small_split)
    rows = list(csv.reader(io.StringIO(rec.to_csv())))
    assert rows[0] == RUN_HEADER
    for r in rows[1:]:
        assert float(r[3]) == float(r[2]) - float(r[1])


def test_best_epoch_model_is_returned(small_frozen, synthetic_small, small_split):
    model, rec = finetune(small_frozen, quick(epochs=4), synthetic_small, small_split)
    best = rec.rows[rec.best_epoch - 1]
    assert best.val_auc == max(r.val_auc for r in rec.rows)
    test = [synthetic_small[i] for i in small_split.test]
    assert evaluate(model, test).auc == rec.final_test_auc == best.test_auc


def test_k_samples_runs_and_differs(small_frozen, synthetic_small, small_split):
    _, one = finetune(small_frozen, quick(samples=1, scale_value=0.5), synthetic_small, small_split)
    _, three = finetune(small_frozen, quick(samples=3, scale_value=0.5), synthetic_small, small_split)
    assert one.to_csv() != three.to_csv()


# ---- sweeps -----------------------------------------------------------------

def test_fixed_scale_stays_bit_constant(small_frozen, synthetic_small, small_split):
    res = scaling_ablation(small_frozen, quick(), synthetic_small, small_split, [0], fixed_values=[0.5])
    assert res.row("scale", 0.5).details["final_scales"] == [[0.5, 0.5]]
    learned = res.row("scale", "learnable").details["final_scales"][0]
    assert all(s != 0.01 for s in learned)


def test_sweep_cache_reuses_runs(small_frozen, synthetic_small, small_split):
    cache = {}
    a = bottleneck_sweep(small_frozen, quick(), synthetic_small, small_split, [0, 1], d_mids=[3], cache=cache)
    assert len(cache) == 2
    b = scaling_ablation(small_frozen, quick(), synthetic_small, small_split, [0, 1], fixed_values=[], cache=cache)
    assert len(cache) == 2
    assert a.rows[0].per_seed == b.rows[0].per_seed


def test_size_sweep_full_fraction_equals_base_run(small_frozen, synthetic_small, small_split):
    res = size_sweep(small_frozen, quick(), synthetic_small, small_split, [0], fractions=[0.5, 1.0])
    _, base = finetune(small_frozen, quick(seed=0), synthetic_small, small_split)
    assert res.row("train_fraction", 1.0).per_seed == [base.final_test_auc]
    rows = list(csv.reader(io.StringIO(res.to_csv())))
    assert rows[0] == SWEEP_HEADER and len(rows) == 3


def test_robustness_level_zero_equals_clean(small_frozen, synthetic_small, small_split):
    model, rec = finetune(small_frozen, quick(), synthetic_small, small_split)
    test = [synthetic_small[i] for i in small_split.test]
    res = robustness_sweep([model], test, [0], levels=[0.0, 0.4])
    assert res.row("delete", 0.0).per_seed == [rec.final_test_auc]
    assert res.row("add", 0.0).per_seed == [rec.final_test_auc]
    again = robustness_sweep([model], test, [0], levels=[0.0, 0.4])
    assert again.to_csv() == res.to_csv()
    with pytest.raises(ValueError):
        robustness_sweep([model], test, [0, 1])


def test_generalization_track_of_identical_runs_is_zero(small_frozen, synthetic_small, small_split):
    _, rec = finetune(small_frozen, quick(), synthetic_small, small_split)
    cmp = generalization_track([rec, rec], [rec, rec], last=2)
    assert cmp.late_mean_a == cmp.late_mean_b
    assert cmp.to_csv().splitlines()[-1].endswith(",0.0")
    with pytest.raises(ValueError):
        generalization_track([rec], [RunRecord()])


# ---- trends on the planted synthetic task (slow) ---------------------------

@pytest.mark.slow
def test_planted_rule_is_learnable(experiment):
    aucs = [rec.final_test_auc for _, rec in experiment.runs()]
    assert np.mean(aucs) > 0.8


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="measured: d_mid=2 scores about 0.02 AUC above d_mid=15 on this task")
def test_tiny_bottleneck_underfits(experiment):
    experiment.runs()  # fill the cache with the d_mid=15 runs
    res = bottleneck_sweep(experiment.backbone, experiment.base, experiment.data, experiment.split,
                           experiment.seeds, d_mids=[2, 15], cache=experiment.cache)
    assert res.row("d_mid", 2).mean < res.row("d_mid", 15).mean
