"""Bit-width sweeps and level comparisons."""

from __future__ import annotations

import copy
import csv
import io

import numpy as np

from ..allocator import GradMagEstimator
from ..profiler import empirical_variance
from .config import TrainConfig
from .levels import apply_level
from .train import Run, make_run, train

DEFAULT_BITS = (1, 1.25, 1.5, 1.75, 2, 2.5, 3, 4)
SWEEP_COLUMNS = ("level", "bits", "final_loss", "eval_accuracy", "grad_variance", "grad_variance_se")


def valid_combo(level: str, bits: float) -> bool:
    return level in ("L2.5", "L3") or float(bits) == int(bits)


def probe_batch(run: Run):
    ids = np.arange(min(run.config.batch_size, len(run.data.x_train)))
    return run.reshape(run.data.x_train[ids]), run.data.y_train[ids], ids


def quantization_variance(run: Run, trials: int):
    """Pooled parameter-gradient variance over quantization draws on the probe batch."""
    x, y, ids = probe_batch(run)
    est = empirical_variance(run.executor, type(run.loss)(), x, y, trials, ids)
    return est.total(), est.total_stderr()


def run_bits_sweep(config: TrainConfig, bits_list=DEFAULT_BITS, levels=None, trials: int | None = None):
    """Train one run per (level, bits) and measure the variance after training.

    Combinations with fractional bits at L0-L2 are skipped.
    """
    levels = list(levels) if levels else [config.level]
    trials = trials or config.variance_trials
    rows = []
    for level in levels:
        for b in bits_list:
            if not valid_combo(level, b):
                continue
            cfg = config.with_overrides(level=level, bits=float(b))
            run = make_run(cfg)
            log = train(cfg, run=run)
            losses = log.column("loss")
            tail = losses[-max(1, len(losses) // 10):] if losses else [float("nan")]
            acc = log.rows[-1]["eval_accuracy"] if log.rows else None
            var, se = quantization_variance(run, trials)
            rows.append({"level": level, "bits": float(b), "final_loss": float(np.mean(tail)),
                         "eval_accuracy": acc, "grad_variance": var, "grad_variance_se": se})
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in SWEEP_COLUMNS])
    return buf.getvalue()


def adapt(run: Run, steps: int):
    """Forward/backward rounds that only update the estimator and budgets."""
    cfg = run.config
    ex = run.executor
    d = run.data
    n = len(d.x_train)
    rng = np.random.default_rng([cfg.seed, 7])
    for _ in range(steps):
        ids = np.sort(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        out = ex.forward(run.reshape(d.x_train[ids]), ids)
        run.loss.forward(out, d.y_train[ids])
        ex.backward(run.loss.backward())
        ex.update_estimator(ids)
        if cfg.level == "L3":
            ex.reallocate(cfg.bits, cfg.normalize_greedy)


def compare_levels(config: TrainConfig, levels=("L2", "L2.5", "L3"), adapt_steps: int = 20,
                   trials: int = 200, pretrain: bool = True) -> dict:
    """Quantization variance of each level at shared weights.

    Weights come from ``config.epochs`` of full-precision training (skipped
    with ``pretrain=False``); each level then gets ``adapt_steps`` rounds of
    estimator/budget adaptation without parameter updates.
    """
    base = make_run(config.with_overrides(level="L0"))
    if pretrain:
        train(base.config, run=base)
    out = {}
    for level in levels:
        cfg = config.with_overrides(level=level)
        ex = copy.deepcopy(base.executor)
        ex.estimator = GradMagEstimator(cfg.estimator, cfg.ema_decay, warm_start=cfg.warm_start)
        ex.layer_avg_bits = {}
        run = Run(cfg, base.data, ex, type(base.loss)(), base.input_shape)
        apply_level(ex, level, cfg.bits)
        adapt(run, adapt_steps)
        out[level] = quantization_variance(run, trials)
    return out
