"""Monte-Carlo gradient-variance measurement and its per-source decomposition.

Variance of a gradient vector g is ``E||g||^2 - ||E g||^2`` (summed over
elements). Every routine here re-runs forward/backward with fresh
quantization keys; none of them updates parameters, the estimator or the
layer budgets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import allocator
from .autograd import GraphExecutor, LayerPolicy
from .quantize import measure_group_ranges


@dataclass
class VarianceEstimate:
    variance: dict  # layer index -> variance
    stderr: dict  # layer index -> standard error of the variance estimate
    trials: int

    def total(self) -> float:
        return float(sum(self.variance.values()))

    def total_stderr(self) -> float:
        return float(np.sqrt(sum(s ** 2 for s in self.stderr.values())))


def param_layers(executor: GraphExecutor) -> list[int]:
    return [i for i, layer in enumerate(executor.layers) if layer.param_names]


def _flat_grads(grads, idx):
    return {i: np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads[i]]) for i in idx}


def _variance_from_samples(samples: dict, trials: int) -> VarianceEstimate:
    var, se = {}, {}
    for i, g in samples.items():
        g = np.stack(g)
        d = g - g[0]  # shift keeps identical draws at exactly zero
        mean = d.mean(axis=0)
        dev = ((d - mean) ** 2).sum(axis=1)
        var[i] = float(dev.sum() / (trials - 1))
        se[i] = float(dev.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return VarianceEstimate(var, se, trials)


def _run_grads(executor, loss, x, y, sample_ids=None):
    out = executor.forward(x, sample_ids)
    loss.forward(out, y)
    return executor.backward(loss.backward())


def empirical_variance(executor: GraphExecutor, loss, x, y, trials: int = 100,
                       sample_ids=None) -> VarianceEstimate:
    """Variance of each layer's parameter gradient over quantization draws, fixed batch."""
    if trials < 2:
        raise ValueError("need at least 2 trials")
    idx = param_layers(executor)
    samples = {i: [] for i in idx}
    for _ in range(trials):
        flat = _flat_grads(_run_grads(executor, loss, x, y, sample_ids), idx)
        for i in idx:
            samples[i].append(flat[i])
    return _variance_from_samples(samples, trials)


@dataclass
class VarianceReport:
    sources: list  # row labels: quantized layer indices
    params: list  # column labels: parameter layer indices
    matrix: np.ndarray  # (len(sources), len(params))
    sampling: np.ndarray  # (len(params),)
    total: np.ndarray  # all contexts as configured + minibatch sampling
    quantization_total: np.ndarray  # all contexts as configured, fixed batch
    metadata: dict = field(default_factory=dict)

    def column_sum(self) -> np.ndarray:
        return self.matrix.sum(axis=0) + self.sampling

    def to_csv(self, names=None) -> str:
        def label(i):
            return names[i] if names else f"layer{i}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source"] + [label(l) for l in self.params])
        for m, row in zip(self.sources, self.matrix):
            w.writerow([label(m)] + [repr(float(v)) for v in row])
        w.writerow(["sampling"] + [repr(float(v)) for v in self.sampling])
        w.writerow(["total"] + [repr(float(v)) for v in self.total])
        return buf.getvalue()


def _only(policy, m):
    return [p if i == m else LayerPolicy.fp() for i, p in enumerate(policy)]


def decompose_variance(executor: GraphExecutor, loss, X, Y, batch_size: int, trials: int = 100,
                       sampling_batches: int = 100, condition_batches: int = 1,
                       seed: int = 0) -> VarianceReport:
    """Per-source decomposition of the parameter-gradient variance.

    Row ``m`` is the variance of every parameter gradient when only layer
    ``m`` keeps a quantized context (all others full precision), averaged over
    ``condition_batches`` fixed minibatches. ``sampling`` is the full-precision
    variance over ``sampling_batches`` random minibatches. ``total`` draws a
    fresh minibatch and fresh quantization on every trial.
    """
    if trials < 2:
        raise ValueError("need at least 2 trials")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    idx = param_layers(executor)
    policy = list(executor.policy)
    saved_bits = dict(executor.layer_avg_bits)
    sources = executor.quantized_layers()

    def batch():
        sel = np.sort(rng.choice(n, size=batch_size, replace=False))
        return X[sel], Y[sel], sel

    fixed = [batch() for _ in range(condition_batches)]
    try:
        matrix = np.zeros((len(sources), len(idx)))
        for r, m in enumerate(sources):
            executor.policy = _only(policy, m)
            for xb, yb, ids in fixed:
                est = empirical_variance(executor, loss, xb, yb, trials, ids)
                matrix[r] += [est.variance[i] / condition_batches for i in idx]

        executor.policy = [LayerPolicy.fp() for _ in policy]
        samples = {i: [] for i in idx}
        for _ in range(sampling_batches):
            xb, yb, ids = batch()
            flat = _flat_grads(_run_grads(executor, loss, xb, yb, ids), idx)
            for i in idx:
                samples[i].append(flat[i])
        sampling = _variance_from_samples(samples, sampling_batches)

        executor.policy = policy
        quant = np.zeros(len(idx))
        for xb, yb, ids in fixed:
            est = empirical_variance(executor, loss, xb, yb, trials, ids)
            quant += [est.variance[i] / condition_batches for i in idx]
        samples = {i: [] for i in idx}
        for _ in range(trials):
            xb, yb, ids = batch()
            flat = _flat_grads(_run_grads(executor, loss, xb, yb, ids), idx)
            for i in idx:
                samples[i].append(flat[i])
        total = _variance_from_samples(samples, trials)
    finally:
        executor.policy = policy
        executor.layer_avg_bits = saved_bits

    return VarianceReport(
        sources=sources, params=idx, matrix=matrix,
        sampling=np.array([sampling.variance[i] for i in idx]),
        total=np.array([total.variance[i] for i in idx]),
        quantization_total=quant,
        metadata={"trials": trials, "sampling_batches": sampling_batches,
                  "condition_batches": condition_batches, "seed": seed,
                  "batch_size": batch_size},
    )


def approx_objective(stats: dict, bits: dict) -> float:
    """Own-layer terms only: sum_l sum_n w[l, n] / B[l, n]^2."""
    total = 0.0
    for i, s in stats.items():
        total += allocator.objective(s.weights, bits[i])
    return total


# ---------------------------------------------------------------------------
# heterogeneity
# ---------------------------------------------------------------------------

def capture_inputs(executor: GraphExecutor, x) -> dict:
    """Inputs of every quantizable layer for one full-precision forward."""
    captured = {}
    h = np.asarray(x)
    for i, layer in enumerate(executor.layers):
        if layer.quantizable:
            captured[i] = h
        h = layer.predict(h)
    return captured


def log_histogram(values, bins_per_decade: int = 4):
    """Rows (lo, hi, count) on log10-spaced bins; zeros get their own [0, 0] row."""
    v = np.asarray(values, dtype=np.float64).ravel()
    zeros = int((v <= 0).sum())
    pos = v[v > 0]
    rows = []
    if zeros:
        rows.append((0.0, 0.0, zeros))
    if pos.size:
        lo = np.floor(np.log10(pos.min()))
        hi = np.ceil(np.log10(pos.max()))
        if hi <= lo:
            hi = lo + 1
        edges = 10.0 ** np.linspace(lo, hi, int(hi - lo) * bins_per_decade + 1)
        counts, _ = np.histogram(pos, bins=edges)
        rows.extend((float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts))
    return rows


def heterogeneity_report(executor: GraphExecutor, loss, x, y, layer: int | None = None) -> dict:
    """Range histogram, per-sample sensitivity histogram and per-layer
    per-dimension sensitivity for one batch.

    Sensitivities use the batch's actual output-gradient magnitudes.
    """
    inputs = capture_inputs(executor, x)
    policy = list(executor.policy)
    executor.policy = [LayerPolicy.fp() for _ in policy]
    try:
        _run_grads(executor, loss, x, y)
        grad_sq = dict(executor.grad_sq)
    finally:
        executor.policy = policy
    layers = sorted(inputs)
    if not layers:
        return {"range_histogram": [], "sensitivity_histogram": [], "layer_sensitivity": []}
    if layer is None:
        layer = layers[len(layers) // 2]
    per_layer = []
    sens = {}
    for i in layers:
        h = inputs[i]
        ranges, norms = measure_group_ranges(h, executor.group_size)
        stats = executor.layers[i].sensitivity(grad_sq[i], norms, executor.group_size, h.shape[1:])
        sens[i] = (ranges, stats)
        per_layer.append((i, executor.layers[i].kind, stats.dim, float(stats.weights.sum() / stats.dim)))
    ranges, stats = sens[layer]
    return {
        "layer": layer,
        "range_histogram": log_histogram(ranges),
        "sensitivity_histogram": log_histogram(stats.weights),
        "layer_sensitivity": per_layer,
    }


def heterogeneity_csv(report: dict) -> dict:
    out = {}
    for key in ("range_histogram", "sensitivity_histogram"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for row in report[key]:
            w.writerow([repr(row[0]), repr(row[1]), row[2]])
        out[key] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "dim", "sensitivity_per_dim"])
    for row in report["layer_sensitivity"]:
        w.writerow([row[0], row[1], row[2], repr(row[3])])
    out["layer_sensitivity"] = buf.getvalue()
    return out
