import numpy as np
import pytest

from actcompress.allocator import GradMagEstimator, objective
from actcompress.autograd import GraphExecutor, LayerPolicy, MSELoss
from actcompress.layers import BatchNorm, Conv2d, Flatten, Linear, MaxPool2d, ReLU, SensitivityStats
from actcompress.profiler import (
    approx_objective, decompose_variance, empirical_variance, heterogeneity_csv, heterogeneity_report,
    log_histogram,
)

from helpers import compressed


def mlp(seed=0, bn=True):
    rng = np.random.default_rng(seed)
    layers = [Linear(12, 16, rng=rng)]
    if bn:
        layers.append(BatchNorm(16))
    layers += [ReLU(), Linear(16, 8, rng=rng), ReLU(), Linear(8, 3, rng=rng)]
    return layers


def data(n=64, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 12)).astype(np.float32), rng.standard_normal((n, 3)).astype(np.float32)


def test_fp_variance_exactly_zero():
    x, y = data(16)
    est = empirical_variance(GraphExecutor(mlp()), MSELoss(), x, y, trials=5)
    assert all(v == 0.0 for v in est.variance.values())


def test_lossless_contexts_give_zero_variance():
    x, y = data(16)
    ex = GraphExecutor([Linear(12, 6), ReLU(), Linear(6, 3)])
    ex.set_policy([LayerPolicy(), LayerPolicy(compress=True), LayerPolicy()])
    est = empirical_variance(ex, MSELoss(), x, y, trials=5)
    assert all(v == 0.0 for v in est.variance.values())


def test_trials_validation():
    x, y = data(4)
    with pytest.raises(ValueError):
        empirical_variance(GraphExecutor(mlp()), MSELoss(), x, y, trials=1)


def test_standard_error_shrinks_with_trials():
    x, y = data(16)
    ex = compressed([Linear(12, 3, rng=np.random.default_rng(0))], bits=2, group_size=4)
    a = empirical_variance(ex, MSELoss(), x, y, trials=100)
    b = empirical_variance(ex, MSELoss(), x, y, trials=400)
    ratio = b.stderr[0] / a.stderr[0]
    assert 0.35 < ratio < 0.7
    assert abs(a.variance[0] / b.variance[0] - 1) < 0.3


def test_decomposition_structure():
    x, y = data(128)
    ex = compressed(mlp(), bits=2, group_size=4)
    rep = decompose_variance(ex, MSELoss(), x, y, batch_size=32, trials=20, sampling_batches=20)
    assert rep.sources == [0, 1, 3, 5] and rep.params == [0, 1, 3, 5]
    m = rep.matrix
    # only batchnorm's context reaches upstream parameters
    for r, src in enumerate(rep.sources):
        for c, par in enumerate(rep.params):
            if par > src or (par < src and ex.layers[src].kind != "batchnorm"):
                assert m[r, c] == 0.0
            if par == src:
                assert m[r, c] > 0
    assert m[1, 0] > 0
    assert np.all(rep.sampling > 0)
    # policy restored afterwards
    assert ex.quantized_layers() == [0, 1, 3, 5]
    csv = rep.to_csv()
    assert csv.splitlines()[0] == "source,layer0,layer1,layer3,layer5"
    assert csv.splitlines()[-2].startswith("sampling,")


def test_fp_decomposition_only_sampling():
    x, y = data(128)
    ex = GraphExecutor(mlp())
    rep = decompose_variance(ex, MSELoss(), x, y, batch_size=32, trials=5, sampling_batches=10)
    assert rep.matrix.size == 0
    assert np.all(rep.quantization_total == 0)
    assert np.all(rep.sampling > 0)


def test_approx_objective_matches_allocator():
    w = np.array([3.0, 1.0, 0.5])
    b = np.array([2, 3, 1])
    stats = {0: SensitivityStats(w, w, w, 4)}
    assert approx_objective(stats, {0: b}) == objective(w, b)
    assert approx_objective({}, {}) == 0.0


def test_approx_objective_tracks_measured_variance():
    # dense inputs and full groups, where the closed form is accurate
    rng = np.random.default_rng(0)
    layers = [Linear(256, 256, rng=rng), Linear(256, 256, rng=rng), Linear(256, 4, rng=rng)]
    x = rng.standard_normal((16, 256)).astype(np.float32)
    y = rng.standard_normal((16, 4)).astype(np.float32)
    ex = compressed(layers, bits=2, estimator=GradMagEstimator("stale"))
    ids = np.arange(16)
    loss = MSELoss()
    loss.forward(ex.forward(x, ids), y)
    ex.backward(loss.backward())
    ex.update_estimator(ids)  # true per-sample gradient magnitudes
    ex.forward(x, ids)
    approx = approx_objective(ex.stats, ex.bits)
    est = empirical_variance(ex, loss, x, y, trials=200, sample_ids=ids)
    assert approx <= est.total() * 1.1
    assert approx >= est.total() * 0.9


def test_heterogeneity_constant_input():
    ex = GraphExecutor([Linear(8, 2, weight=np.zeros((8, 2)))])
    rep = heterogeneity_report(ex, MSELoss(), np.ones((4, 8), np.float32), np.zeros((4, 2), np.float32))
    assert rep["range_histogram"] == [(0.0, 0.0, 4)]


def test_heterogeneity_tables():
    rng = np.random.default_rng(0)
    layers = [Conv2d(1, 4, 3, padding=1, rng=rng), BatchNorm(4), ReLU(), MaxPool2d(2), Flatten(),
              Linear(64, 3, rng=rng)]
    x = np.exp(2.5 * rng.standard_normal((16, 1, 8, 8))).astype(np.float32)
    y = rng.standard_normal((16, 3)).astype(np.float32)
    ex = GraphExecutor(layers, group_size=8)
    rep = heterogeneity_report(ex, MSELoss(), x, y, layer=0)
    assert [r[0] for r in rep["layer_sensitivity"]] == [0, 1, 5]
    edges = [r for r in rep["range_histogram"] if r[2] > 0]
    assert edges[-1][1] / edges[0][0] >= 100
    tables = heterogeneity_csv(rep)
    assert tables["layer_sensitivity"].splitlines()[0] == "layer,kind,dim,sensitivity_per_dim"
    assert len(tables["layer_sensitivity"].splitlines()) == 4


def test_log_histogram():
    rows = log_histogram([0.0, 1.0, 10.0, 100.0], bins_per_decade=1)
    assert rows[0] == (0.0, 0.0, 1)
    assert sum(r[2] for r in rows) == 4
    assert log_histogram([]) == []


def test_halving_bits_multiplies_variance_by_25():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, (16, 256)).astype(np.float32)
    y = rng.standard_normal((16, 4)).astype(np.float32)
    layers = [Linear(256, 64, rng=rng), ReLU(), Linear(64, 4, rng=rng)]
    var = {b: empirical_variance(compressed(layers, bits=b), MSELoss(), x, y, trials=300).total()
           for b in (2, 4)}
    assert abs(var[2] / var[4] / 25 - 1) < 0.3
