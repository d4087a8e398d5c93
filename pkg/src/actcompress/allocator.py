"""Mixed-precision bit allocation.

Minimizes ``sum_{l,n} w[l, n] / (2^b[l, n] - 1)^2`` subject to
``sum_l D[l] * sum_n b[l, n] <= budget`` and ``b_min <= b <= b_max``.
The greedy solver runs on every training step; the DP solver is exact and
only meant as a test oracle.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

B_MIN = 1
B_MAX = 8
DP_STATE_LIMIT = 2_000_000


class InfeasibleBudget(ValueError):
    pass


@dataclass
class AllocProblem:
    weights: np.ndarray  # (L, N), nonnegative
    dims: np.ndarray  # (L,), positive
    budget: int
    b_min: int = B_MIN
    b_max: int = B_MAX

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.dims = np.asarray(self.dims, dtype=np.int64).reshape(-1)
        if self.dims.size != self.weights.shape[0]:
            raise ValueError(f"{self.dims.size} dims for {self.weights.shape[0]} layers")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")
        if np.any(self.dims <= 0):
            raise ValueError("dims must be positive")
        if not 1 <= self.b_min <= self.b_max:
            raise ValueError("need 1 <= b_min <= b_max")

    @property
    def min_budget(self) -> int:
        return int(self.dims.sum() * self.weights.shape[1] * self.b_min)

    @property
    def max_budget(self) -> int:
        return int(self.dims.sum() * self.weights.shape[1] * self.b_max)

    def check_feasible(self):
        if self.budget < self.min_budget:
            raise InfeasibleBudget(f"budget {self.budget} below minimum {self.min_budget}")


@dataclass
class BitAllocation:
    bits: np.ndarray  # (L, N) ints
    objective: float
    consumed: int
    decrements: int = field(default=0)


def bins(bits):
    return (np.left_shift(1, np.asarray(bits, dtype=np.int64)) - 1).astype(np.float64)


def objective(weights, bits) -> float:
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bits)
    if w.shape != b.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {b.shape}")
    return float((w / bins(b) ** 2).sum())


def _step_cost(w, b):
    """Objective increase when b drops to b - 1."""
    return w * (1.0 / ((1 << (b - 1)) - 1) ** 2 - 1.0 / ((1 << b) - 1) ** 2)


def greedy_allocate(p: AllocProblem, normalize: bool = True, refill: bool = True) -> BitAllocation:
    """Start every entry at b_max and repeatedly lower the cheapest one.

    With ``normalize`` the priority is the objective increase per freed bit
    (increase / D[l]); otherwise the raw increase. Ties go to the lowest
    (layer, sample). When layers differ in D the last decrement can overshoot
    the budget; ``refill`` then spends the slack on the most useful increments
    and falls back to the best uniform allocation if that is better.
    """
    p.check_feasible()
    L, N = p.weights.shape
    bits = np.full((L, N), p.b_max, dtype=np.int64)
    consumed = p.max_budget
    decrements = 0
    scale = p.dims.astype(np.float64) if normalize else np.ones(L)
    if consumed > p.budget and p.b_max > p.b_min:
        heap = [(_step_cost(p.weights[l, n], p.b_max) / scale[l], l, n)
                for l in range(L) for n in range(N)]
        heapq.heapify(heap)
        while consumed > p.budget:
            _, l, n = heapq.heappop(heap)
            bits[l, n] -= 1
            consumed -= int(p.dims[l])
            decrements += 1
            b = bits[l, n]
            if b > p.b_min:
                heapq.heappush(heap, (_step_cost(p.weights[l, n], b) / scale[l], l, n))
    if refill and consumed < p.budget:
        consumed = _refill(p, bits, consumed, scale)
        ub = (p.budget // (int(p.dims.sum()) * N)) if N else p.b_max
        ub = min(int(ub), p.b_max)
        if ub >= p.b_min:
            uni = np.full((L, N), ub, dtype=np.int64)
            if objective(p.weights, uni) < objective(p.weights, bits):
                bits = uni
                consumed = int(p.dims.sum()) * N * ub
    return BitAllocation(bits, objective(p.weights, bits), int(consumed), decrements)


def _refill(p: AllocProblem, bits, consumed, scale) -> int:
    slack = p.budget - consumed
    L, N = bits.shape
    heap = [(-_step_cost(p.weights[l, n], bits[l, n] + 1) / scale[l], l, n)
            for l in range(L) for n in range(N) if bits[l, n] < p.b_max]
    heapq.heapify(heap)
    while heap:
        _, l, n = heapq.heappop(heap)
        d = int(p.dims[l])
        if d > slack:
            continue  # slack never grows, so this entry is done
        bits[l, n] += 1
        slack -= d
        if bits[l, n] < p.b_max:
            heapq.heappush(heap, (-_step_cost(p.weights[l, n], bits[l, n] + 1) / scale[l], l, n))
    return p.budget - slack


def dp_allocate_exact(p: AllocProblem) -> BitAllocation:
    """Exact minimizer by knapsack DP over (entry, consumed budget)."""
    p.check_feasible()
    L, N = p.weights.shape
    cap = min(p.budget, p.max_budget)
    entries = [(l, n) for l in range(L) for n in range(N)]
    if len(entries) * (cap + 1) > DP_STATE_LIMIT:
        raise ValueError(f"instance too large for exact DP ({len(entries)} x {cap + 1} states)")
    levels = np.arange(p.b_min, p.b_max + 1)
    inf = np.inf
    best = np.zeros(cap + 1)
    choice = np.zeros((len(entries), cap + 1), dtype=np.int8)
    for k, (l, n) in enumerate(entries):
        d = int(p.dims[l])
        new = np.full(cap + 1, inf)
        for b in levels:
            cost = d * int(b)
            if cost > cap:
                break
            cand = np.full(cap + 1, inf)
            cand[cost:] = best[:cap + 1 - cost] + p.weights[l, n] / ((1 << int(b)) - 1) ** 2
            better = cand < new
            new[better] = cand[better]
            choice[k, better] = b
        best = new
    c = int(np.argmin(best))
    bits = np.zeros((L, N), dtype=np.int64)
    for k in range(len(entries) - 1, -1, -1):
        l, n = entries[k]
        b = int(choice[k, c])
        bits[l, n] = b
        c -= int(p.dims[l]) * b
    consumed = int((p.dims[:, None] * bits).sum())
    return BitAllocation(bits, objective(p.weights, bits), consumed)


def allocate_per_sample(weights, layer_budget: int, b_min=B_MIN, b_max=B_MAX) -> np.ndarray:
    """Per-sample bits for one layer, sum(bits) <= layer_budget."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    alloc = greedy_allocate(AllocProblem(w, [1], int(layer_budget), b_min, b_max))
    return alloc.bits[0]


def allocate_per_layer(weights, dims, total_budget: int, b_min=B_MIN, b_max=B_MAX,
                       normalize: bool = True):
    """Joint solve over all layers; returns (per-layer bit sums, allocation)."""
    alloc = greedy_allocate(AllocProblem(weights, dims, int(total_budget), b_min, b_max), normalize)
    return alloc.bits.sum(axis=1), alloc


def uniform_bits(num_layers, num_samples, bits) -> np.ndarray:
    return np.full((num_layers, num_samples), int(bits), dtype=np.int64)


class GradMagEstimator:
    """Estimates ||grad_n||^2 before the gradient exists.

    ``stale``: last value recorded for each sample (one epoch old).
    ``ema``: per-layer exponential moving average of the batch mean.

    Without observations both modes return ``initial``. Real gradient
    magnitudes can sit many decades below 1.0, so ``warm_start`` replaces
    that default once a layer has data: the EMA starts at the first batch
    mean, and unseen samples in stale mode get the mean of the layer's
    recorded values.
    """

    def __init__(self, mode: str = "ema", decay: float = 0.9, initial: float = 1.0,
                 warm_start: bool = False):
        if mode not in ("stale", "ema"):
            raise ValueError(f"unknown estimator mode {mode!r}")
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if initial <= 0:
            raise ValueError("initial estimate must be positive")
        self.mode = mode
        self.decay = decay
        self.initial = float(initial)
        self.warm_start = warm_start
        self._per_sample: dict[int, dict[int, float]] = {}
        self._mean: dict[int, float] = {}
        self._stale_sum: dict[int, float] = {}

    def estimate(self, layer: int, sample_ids=None, count: int | None = None) -> np.ndarray:
        if self.mode == "ema":
            n = (count or 0) if sample_ids is None else len(sample_ids)
            return np.full(n, self._mean.get(layer, self.initial))
        store = self._per_sample.get(layer, {})
        default = self.initial
        if self.warm_start and store:
            default = self._stale_sum[layer] / len(store)
        if sample_ids is None:  # anonymous samples cannot be looked up
            return np.full(count or 0, default)
        return np.array([store.get(int(s), default) for s in sample_ids], dtype=np.float64)

    def update(self, layer: int, observed, sample_ids=None):
        obs = np.asarray(observed, dtype=np.float64).ravel()
        if self.mode == "ema":
            prev = self._mean.get(layer)
            mean = float(obs.mean())
            if prev is None:
                if self.warm_start:
                    self._mean[layer] = mean
                    return
                prev = self.initial
            self._mean[layer] = self.decay * prev + (1.0 - self.decay) * mean
        elif sample_ids is not None:
            store = self._per_sample.setdefault(layer, {})
            total = self._stale_sum.get(layer, 0.0)
            for s, v in zip(np.asarray(sample_ids).ravel(), obs):
                total += float(v) - store.get(int(s), 0.0)
                store[int(s)] = float(v)
            self._stale_sum[layer] = total
