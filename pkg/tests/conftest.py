import numpy as np
import pytest

from uadaptergnn.backbone import Backbone, BackboneConfig, freeze
from uadaptergnn.graph import Graph, generate_synthetic


def central_diff(fn, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr``, mutated in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def make_graph(n, edges, d_in=3, n_tasks=1, edge_dim=0, seed=0, y=None):
    rng = np.random.default_rng(seed)
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    edge_x = rng.standard_normal((edges.shape[0], edge_dim)) if edge_dim else None
    yv = np.array(y if y is not None else [1.0] * n_tasks)
    return Graph(rng.standard_normal((n, d_in)), edges, edge_x, yv, np.ones(n_tasks))


@pytest.fixture
def tiny_graphs():
    return [
        make_graph(4, [[0, 1], [1, 2], [2, 3]], edge_dim=2, n_tasks=2, seed=1, y=[1, 0]),
        make_graph(3, [[0, 2]], edge_dim=2, n_tasks=2, seed=2, y=[0, 1]),
        make_graph(5, [[0, 1], [0, 2], [3, 4], [1, 4]], edge_dim=2, n_tasks=2, seed=3, y=[1, 1]),
    ]


@pytest.fixture
def frozen_backbone():
    bb = Backbone(BackboneConfig(d_in=3, d_hidden=8, num_layers=2, d_edge=2), seed=7)
    # non-trivial running stats so eval-mode BN is not the identity
    for l, layer in enumerate(bb.layers):
        rng = np.random.default_rng(l)
        layer.bn.running_mean = rng.standard_normal(8) * 0.1
        layer.bn.running_var = rng.uniform(0.5, 2.0, 8)
        layer.bn.gamma.data = rng.uniform(0.5, 1.5, 8)
        layer.bn.beta.data = rng.standard_normal(8) * 0.1
    return freeze(bb)


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic(3, 60, n_nodes_range=(5, 10), d_in=4, n_tasks=2)


@pytest.fixture
def small_frozen():
    """Frozen 2-layer backbone sized for ``synthetic_small``."""
    return freeze(Backbone(BackboneConfig(d_in=4, d_hidden=8, num_layers=2, d_edge=3), seed=1))


class Experiment:
    """The synthetic trend protocol shared by slow tests and acceptance.

    A 2-layer width-16 backbone is pretrained once by edge prediction, then
    600 planted-rule graphs are fine-tuned on with 5 seeds. Runs are memoized
    so a configuration used by several checks is trained only once.
    """

    seeds = (0, 1, 2, 3, 4)

    def __init__(self):
        from uadaptergnn.backbone import PretrainConfig, edgepred_auc, pretrain_edgepred
        from uadaptergnn.graph import split_dataset
        from uadaptergnn.training import FineTuneConfig

        pre = generate_synthetic(100, 200)
        bb = Backbone(BackboneConfig(d_in=8, d_hidden=16, num_layers=2, d_edge=3), seed=0)
        pretrain_edgepred(bb, pre[:160], PretrainConfig(epochs=50))
        self.backbone = freeze(bb)
        self.pretrain_auc = edgepred_auc(self.backbone, pre[160:])
        self.data = generate_synthetic(1, 600)
        self.split = split_dataset(600, 0)
        self.base = FineTuneConfig(epochs=100)
        self.cache = {}
        self._models = {}

    def runs(self, **overrides):
        """(model, record) for every seed of ``base`` with ``overrides`` applied."""
        from dataclasses import replace

        from uadaptergnn.training import finetune, run_key

        out = []
        for seed in self.seeds:
            cfg = replace(self.base, seed=seed, **overrides)
            key = run_key(cfg, self.split)
            if key not in self._models:
                self._models[key] = finetune(self.backbone, cfg, self.data, self.split)
                self.cache[key] = self._models[key][1]
            out.append(self._models[key])
        return out

    @property
    def test_graphs(self):
        return [self.data[i] for i in self.split.test]


@pytest.fixture(scope="session")
def experiment():
    return Experiment()


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``report(n, title, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])
    reported = []

    def report(n, title, ok, detail):
        line = f"criterion {n:>2}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        lines.append((n, line))
        reported.append(n)
        assert ok, line

    yield report
    if not reported:
        lines.append((request.node.name, f"{request.node.name}: FAIL (raised before reporting)"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: (isinstance(t[0], str), t[0])):
            terminalreporter.write_line(line)
