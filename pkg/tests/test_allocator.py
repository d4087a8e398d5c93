import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actcompress.allocator import (
    AllocProblem, GradMagEstimator, InfeasibleBudget, allocate_per_layer, allocate_per_sample,
    dp_allocate_exact, greedy_allocate, objective, uniform_bits,
)


def brute_force(p):
    L, N = p.weights.shape
    best = None
    for combo in itertools.product(range(p.b_min, p.b_max + 1), repeat=L * N):
        b = np.array(combo).reshape(L, N)
        if (p.dims[:, None] * b).sum() <= p.budget:
            val = objective(p.weights, b)
            if best is None or val < best[0]:
                best = (val, b)
    return best


def test_objective_examples():
    assert objective([[4], [1]], [[2], [2]]) == pytest.approx(5 / 9)
    assert objective(np.zeros((2, 3)), np.full((2, 3), 5)) == 0
    assert objective([[1.0]], [[3]]) < objective([[1.0]], [[2]])


def test_two_entry_instance():
    p = AllocProblem([[16], [1]], [1, 1], 6)
    g, d = greedy_allocate(p), dp_allocate_exact(p)
    assert g.bits.ravel().tolist() == [4, 2] == d.bits.ravel().tolist()
    assert g.objective == pytest.approx(16 / 225 + 1 / 9) == pytest.approx(0.18222, abs=1e-5)
    assert brute_force(p)[1].ravel().tolist() == [4, 2]


def test_budget_extremes():
    w = np.random.default_rng(0).uniform(0, 1, (2, 3))
    full = greedy_allocate(AllocProblem(w, [2, 5], 8 * 3 * 7))
    assert np.all(full.bits == 8) and full.decrements == 0
    low = greedy_allocate(AllocProblem(w, [2, 5], 3 * 7))
    assert np.all(low.bits == 1)
    with pytest.raises(InfeasibleBudget):
        greedy_allocate(AllocProblem(w, [2, 5], 3 * 7 - 1))


def test_dp_single_entry_and_limit():
    assert dp_allocate_exact(AllocProblem([[2.0]], [3], 100)).bits.tolist() == [[8]]
    with pytest.raises(ValueError):
        dp_allocate_exact(AllocProblem(np.ones((10, 100)), np.full(10, 50), 10 * 100 * 50 * 4))


def test_problem_validation():
    with pytest.raises(ValueError):
        AllocProblem([[-1.0]], [1], 4)
    with pytest.raises(ValueError):
        AllocProblem([[1.0]], [0], 4)
    with pytest.raises(ValueError):
        AllocProblem([[1.0], [2.0]], [1], 4)


def test_per_sample_examples():
    assert allocate_per_sample(np.ones(5), 10).tolist() == [2] * 5
    assert allocate_per_sample([1e6, 1.0], 9).tolist() == [8, 1]
    bits = allocate_per_sample([0.0, 5.0, 0.0, 5.0], 12)
    assert bits[0] == bits[2] == 1 and bits[1] == bits[3] == 5


def test_per_layer_examples():
    sums, alloc = allocate_per_layer(np.ones((3, 4)), [8, 8, 8], 8 * 3 * 4 * 3)
    assert sums.tolist() == [12, 12, 12]
    # the wide layer pays 10x per bit, so it ends up with fewer bits
    sums, alloc = allocate_per_layer(np.ones((2, 1)), [10, 1], 40)
    assert alloc.bits.ravel().tolist() == [3, 8]
    assert alloc.consumed <= 40


def test_unnormalized_variant_differs():
    p = AllocProblem([[1.0], [1.0]], [10, 1], 40)
    a = greedy_allocate(p, normalize=True, refill=False)
    b = greedy_allocate(p, normalize=False, refill=False)
    assert a.bits.ravel().tolist() == [3, 5] and b.bits.ravel().tolist() == [3, 4]
    assert a.objective < b.objective


def test_uniform_bits():
    assert uniform_bits(2, 3, 4).tolist() == [[4] * 3] * 2


# -- properties ----------------------------------------------------------------------

weights = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def problems(draw, common_dim=False, max_entries=12):
    L = draw(st.integers(1, 3))
    N = draw(st.integers(1, max(1, max_entries // L)))
    w = np.array(draw(st.lists(weights, min_size=L * N, max_size=L * N))).reshape(L, N)
    if common_dim:
        dims = np.full(L, draw(st.integers(1, 4)))
    else:
        dims = np.array(draw(st.lists(st.integers(1, 5), min_size=L, max_size=L)))
    lo, hi = int(dims.sum()) * N, int(dims.sum()) * N * 8
    budget = draw(st.integers(lo, hi))
    return AllocProblem(w, dims, budget)


@settings(max_examples=150, deadline=None)
@given(problems())
def test_greedy_feasible_and_bounded(p):
    a = greedy_allocate(p)
    assert a.consumed == int((p.dims[:, None] * a.bits).sum()) <= p.budget
    assert a.bits.min() >= 1 and a.bits.max() <= 8
    assert a.decrements <= a.bits.size * 7
    assert a.objective == pytest.approx(objective(p.weights, a.bits))


@settings(max_examples=100, deadline=None)
@given(problems())
def test_dp_never_worse_than_greedy(p):
    assert dp_allocate_exact(p).objective <= greedy_allocate(p).objective * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(problems(common_dim=True))
def test_greedy_optimal_with_common_dim(p):
    assert greedy_allocate(p).objective == pytest.approx(dp_allocate_exact(p).objective, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(problems(), st.integers(1, 20))
def test_budget_monotone(p, extra):
    bigger = AllocProblem(p.weights, p.dims, p.budget + extra)
    assert greedy_allocate(bigger).objective <= greedy_allocate(p).objective * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(problems(), st.floats(1e-3, 1e3))
def test_scale_invariance(p, c):
    scaled = AllocProblem(p.weights * c, p.dims, p.budget)
    assert greedy_allocate(scaled).bits.tolist() == greedy_allocate(p).bits.tolist()


@settings(max_examples=100, deadline=None)
@given(problems())
def test_mixed_beats_uniform(p):
    N = p.weights.shape[1]
    ub = min(8, p.budget // (int(p.dims.sum()) * N))
    uni = objective(p.weights, uniform_bits(*p.weights.shape, ub))
    assert greedy_allocate(p).objective <= uni * (1 + 1e-12)


# -- estimator ----------------------------------------------------------------------------

def test_estimator_cold_start():
    for mode in ("stale", "ema"):
        assert GradMagEstimator(mode).estimate(0, [3, 4, 5]).tolist() == [1.0] * 3


def test_ema_recurrence():
    est = GradMagEstimator("ema", 0.9)
    for _ in range(3):
        est.update(0, [1.0])
    assert est.estimate(0, count=2).tolist() == [1.0, 1.0]
    est = GradMagEstimator("ema", 0.9)
    est.update(0, [0.0])
    est.update(0, [1.0])
    assert est.estimate(0, [7])[0] == pytest.approx(0.91)


def test_ema_warm_start():
    est = GradMagEstimator("ema", 0.9, warm_start=True)
    est.update(0, [4e-4, 2e-4])
    assert est.estimate(0, count=1)[0] == pytest.approx(3e-4)
    est.update(0, [0.0])
    assert est.estimate(0, count=1)[0] == pytest.approx(2.7e-4)


def test_stale_per_sample():
    est = GradMagEstimator("stale")
    est.update(2, [0.5, 3.0], [10, 11])
    assert est.estimate(2, [11, 10, 12]).tolist() == [3.0, 0.5, 1.0]
    assert est.estimate(1, [10]).tolist() == [1.0]


def test_estimator_validation():
    with pytest.raises(ValueError):
        GradMagEstimator("median")
    with pytest.raises(ValueError):
        GradMagEstimator("ema", decay=1.0)
    with pytest.raises(ValueError):
        GradMagEstimator("ema", initial=0.0)


def test_stale_warm_start_fills_unseen_samples():
    est = GradMagEstimator("stale", warm_start=True)
    assert est.estimate(0, [1]).tolist() == [1.0]
    est.update(0, [2e-4, 4e-4], [1, 2])
    est.update(0, [6e-4], [2])
    assert est.estimate(0, [1, 2, 3]) == pytest.approx([2e-4, 6e-4, 4e-4])
    assert est.estimate(0, count=2) == pytest.approx([4e-4, 4e-4])
