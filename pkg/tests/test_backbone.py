import hashlib

import numpy as np
import pytest

from uadaptergnn import checkpoint
from uadaptergnn.adapter import NoiseSource
from uadaptergnn.backbone import (
    Backbone,
    BackboneConfig,
    PretrainConfig,
    edgepred_auc,
    freeze,
    gin_forward,
    pretrain_edgepred,
)
from uadaptergnn.graph import Graph, batch, generate_synthetic
from uadaptergnn.model import build_model, expected_trainable_count
from uadaptergnn.numerics import Adam, ShapeError, Tape, Tensor, backward, bce_with_logits_masked

from conftest import central_diff, make_graph, rel_err


def layer0(d=4, d_edge=0, seed=0):
    return Backbone(BackboneConfig(d_in=d, d_hidden=d, num_layers=1, d_edge=d_edge), seed).layers[0]


def checksum(backbone):
    h = hashlib.sha256()
    for name, value in sorted(backbone.named_state().items()):
        if hasattr(value, "data"):
            h.update(np.ascontiguousarray(value.data).tobytes())
        else:
            for arr in (value.gamma.data, value.beta.data, value.running_mean, value.running_var):
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---- GIN layer --------------------------------------------------------------

def test_isolated_node_is_mlp_of_scaled_self():
    layer = layer0()
    layer.eps.data = np.array(0.25)
    g = make_graph(1, [], d_in=4)
    h = Tensor(g.x)
    out = gin_forward(layer, h, batch([g]))
    np.testing.assert_allclose(out.data, layer.mlp(Tensor(1.25 * g.x)).data, rtol=0, atol=1e-15)


def test_zero_neighbours_reduce_to_self_term():
    layer = layer0()
    g = make_graph(3, [[0, 1], [0, 2]], d_in=4)
    g.x[1:] = 0.0
    out = gin_forward(layer, Tensor(g.x), batch([g]))
    np.testing.assert_allclose(out.data[0], layer.mlp(Tensor(g.x[:1])).data[0], rtol=0, atol=1e-15)


def test_symmetric_nodes_get_identical_outputs():
    layer = layer0(d_edge=2)
    g = make_graph(3, [[0, 1], [0, 2]], d_in=4, edge_dim=2)
    g.x[2] = g.x[1]
    g.edge_x[1] = g.edge_x[0]
    out = gin_forward(layer, Tensor(g.x), batch([g])).data
    np.testing.assert_array_equal(out[1], out[2])


def test_gin_permutation_equivariance():
    layer = layer0(d_edge=2, seed=3)
    g = make_graph(6, [[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 3]], d_in=4, edge_dim=2, seed=4)
    perm = np.random.default_rng(5).permutation(6)
    inv = np.argsort(perm)
    pg = Graph(g.x[perm], inv[g.edges], g.edge_x, g.y, g.mask)
    a = gin_forward(layer, Tensor(g.x), batch([g])).data
    b = gin_forward(layer, Tensor(pg.x), batch([pg])).data
    assert np.abs(a[perm] - b).max() <= 1e-10


def test_gin_shape_checks():
    layer = layer0()
    g = make_graph(3, [[0, 1]], d_in=4)
    with pytest.raises(ShapeError):
        gin_forward(layer, Tensor(np.zeros((2, 4))), batch([g]))
    with pytest.raises(ShapeError):
        gin_forward(layer, Tensor(np.zeros((3, 5))), batch([g]))


# ---- full forward -----------------------------------------------------------

def test_logit_shapes(frozen_backbone, tiny_graphs):
    m = build_model(frozen_backbone, 2, "gaussian")
    assert m.forward(batch(tiny_graphs[:1]), NoiseSource.zero()).shape == (1, 2)
    assert m.forward(batch(tiny_graphs), NoiseSource.zero()).shape == (3, 2)


def test_graph_permutation_invariance(frozen_backbone, tiny_graphs):
    m = build_model(frozen_backbone, 2, "gaussian", scale_value=0.5)
    m.set_mode("eval")
    g = tiny_graphs[2]
    perm = np.random.default_rng(6).permutation(g.num_nodes)
    inv = np.argsort(perm)
    pg = Graph(g.x[perm], inv[g.edges], g.edge_x, g.y, g.mask)
    a = m.forward(batch([g]), NoiseSource.zero()).data
    b = m.forward(batch([pg]), NoiseSource.zero()).data
    assert np.abs(a - b).max() <= 1e-10


def test_zero_scale_adapters_reproduce_plain_backbone(frozen_backbone, tiny_graphs):
    plain = build_model(frozen_backbone, 2, "deterministic", seed=3)
    g = build_model(frozen_backbone, 2, "gaussian", scale_mode="fixed", scale_value=0.0, seed=3)
    g.set_mode("eval")
    b = batch(tiny_graphs)
    from uadaptergnn.backbone import forward_pass
    no_adapters = forward_pass(frozen_backbone, g.head, None, b)
    with_adapters = g.forward(b, NoiseSource.zero())
    np.testing.assert_array_equal(no_adapters.data, with_adapters.data)
    assert plain.head.weight.data.tobytes() == g.head.weight.data.tobytes()


def test_batched_equals_single_graph_eval(frozen_backbone, tiny_graphs):
    m = build_model(frozen_backbone, 2, "gaussian", scale_value=0.7)
    m.set_mode("eval")
    joint = m.forward(batch(tiny_graphs), NoiseSource.zero()).data
    single = np.vstack([m.forward(batch([g]), NoiseSource.zero()).data for g in tiny_graphs])
    assert np.abs(joint - single).max() <= 1e-10


def test_adapter_count_mismatch(frozen_backbone, tiny_graphs):
    m = build_model(frozen_backbone, 2, "deterministic")
    from uadaptergnn.backbone import forward_pass
    with pytest.raises(ValueError):
        forward_pass(frozen_backbone, m.head, m.adapters[:1], batch(tiny_graphs))


def test_adapters_require_frozen_backbone():
    bb = Backbone(BackboneConfig(d_in=3, d_hidden=4, num_layers=1))
    with pytest.raises(ValueError, match="frozen"):
        build_model(bb, 1, "gaussian")


@pytest.mark.parametrize("kind", ["gaussian", "deterministic", "none"])
def test_end_to_end_gradients(frozen_backbone, tiny_graphs, kind):
    m = build_model(frozen_backbone, 2, kind, d_mid=3, scale_value=0.5, seed=1)
    b = batch(tiny_graphs)
    y = np.array([g.y for g in tiny_graphs])
    mask = np.ones_like(y)

    def loss():
        return bce_with_logits_masked(m.forward(b, NoiseSource(11)), y, mask)

    with Tape():
        grads = backward(loss())
    params = m.trainable_parameters()
    assert set(grads) == set(params)
    for p in params:
        numeric = central_diff(lambda: loss().item(), p.data)
        assert rel_err(grads[p], numeric) < 1e-4, p.name


def test_trainable_count_matches_formula(frozen_backbone):
    for kind in ("gaussian", "deterministic"):
        for mode in ("learnable", "fixed"):
            m = build_model(frozen_backbone, 2, kind, d_mid=3, scale_mode=mode)
            n = sum(p.data.size for p in m.trainable_parameters())
            assert n == expected_trainable_count(kind, 2, 8, 3, 2, mode)


# ---- freezing ---------------------------------------------------------------

def test_frozen_backbone_receives_no_gradient(frozen_backbone, tiny_graphs):
    m = build_model(frozen_backbone, 2, "gaussian")
    y = np.array([g.y for g in tiny_graphs])
    with Tape():
        grads = backward(bce_with_logits_masked(m.forward(batch(tiny_graphs), NoiseSource(1)), y, np.ones_like(y)))
    backbone_ids = {id(p) for p in frozen_backbone.parameters()}
    assert not any(id(p) in backbone_ids for p in grads)


def test_frozen_backbone_bytes_unchanged_after_100_steps(frozen_backbone, tiny_graphs):
    before = checksum(frozen_backbone)
    m = build_model(frozen_backbone, 2, "gaussian")
    opt = Adam(m.trainable_parameters(), lr=1e-2)
    b = batch(tiny_graphs)
    y = np.array([g.y for g in tiny_graphs])
    noise = NoiseSource(2)
    for _ in range(100):
        with Tape():
            grads = backward(bce_with_logits_masked(m.forward(b, noise), y, np.ones_like(y)))
        opt.step(grads)
    assert checksum(frozen_backbone) == before


# ---- pretraining ------------------------------------------------------------

def small_backbone(seed=0):
    return Backbone(BackboneConfig(d_in=8, d_hidden=16, num_layers=2, d_edge=3), seed)


def test_pretrain_zero_epochs_is_identity():
    bb = small_backbone()
    before = checksum(bb)
    pretrain_edgepred(bb, generate_synthetic(0, 10), PretrainConfig(epochs=0))
    assert checksum(bb) == before


def test_pretrain_is_deterministic():
    data = generate_synthetic(0, 20)
    a = pretrain_edgepred(small_backbone(), data, PretrainConfig(epochs=2))
    b = pretrain_edgepred(small_backbone(), data, PretrainConfig(epochs=2))
    assert checksum(a) == checksum(b)


def test_pretrain_rejects_degenerate_input():
    with pytest.raises(ValueError):
        pretrain_edgepred(small_backbone(), [], PretrainConfig())
    single = [make_graph(1, [], d_in=8)]
    with pytest.raises(ValueError):
        pretrain_edgepred(small_backbone(), single, PretrainConfig())
    with pytest.raises(ValueError):
        pretrain_edgepred(freeze(small_backbone()), generate_synthetic(0, 4), PretrainConfig())


def test_pretrain_beats_chance_on_held_out_edges():
    data = generate_synthetic(100, 200)
    bb = pretrain_edgepred(small_backbone(), data[:160], PretrainConfig(epochs=20))
    assert edgepred_auc(bb, data[160:]) > 0.7


# ---- checkpoints ------------------------------------------------------------

def test_backbone_checkpoint_round_trip(tmp_path, frozen_backbone, tiny_graphs):
    p = tmp_path / "bb.json"
    checkpoint.save_backbone(frozen_backbone, p)
    loaded = checkpoint.load_backbone(p)
    assert loaded.frozen
    assert checksum(loaded) == checksum(frozen_backbone)
    checkpoint.save_backbone(loaded, tmp_path / "again.json")
    assert p.read_bytes() == (tmp_path / "again.json").read_bytes()


@pytest.mark.parametrize("kind", ["gaussian", "deterministic", "none"])
def test_model_checkpoint_round_trip(tmp_path, frozen_backbone, tiny_graphs, kind):
    m = build_model(frozen_backbone, 2, kind, d_mid=3, seed=4)
    for p in m.trainable_parameters():
        p.data = p.data + 0.01  # move away from init
    m.set_mode("eval")
    path = tmp_path / "m.json"
    checkpoint.save_model(m, path)
    loaded = checkpoint.load_model(path, frozen_backbone)
    b = batch(tiny_graphs)
    np.testing.assert_array_equal(m.forward(b, NoiseSource.zero()).data, loaded.forward(b, NoiseSource.zero()).data)


def test_model_checkpoint_rejects_mismatched_backbone(tmp_path, frozen_backbone):
    m = build_model(frozen_backbone, 2, "gaussian", d_mid=3)
    path = tmp_path / "m.json"
    checkpoint.save_model(m, path)
    other = freeze(Backbone(BackboneConfig(d_in=3, d_hidden=6, num_layers=2, d_edge=2)))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_model(path, other)
