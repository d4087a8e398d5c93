"""SGD training loop with two-stage bit adaptation and CSV metrics."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from ..allocator import GradMagEstimator
from ..autograd import CrossEntropyLoss, GraphExecutor, MSELoss, accuracy
from ..profiler import empirical_variance
from ..quantize import PackedActivation
from .config import ConfigError, TrainConfig
from .data import Dataset, load_dataset
from .levels import apply_level
from .models import build_model, infer_input_shape

COLUMNS = ("step", "epoch", "loss", "eval_loss", "eval_accuracy", "grad_variance",
           "avg_bits", "avg_bits_with_metadata", "wall_time")


@dataclass
class MetricsLog:
    """Append-only per-step rows; ``step`` must strictly increase."""

    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError(f"step {row['step']} does not follow {self.rows[-1]['step']}")
        self.rows.append({c: row.get(c) for c in COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def update_last(self, **values):
        # only fills columns that are still empty
        last = self.rows[-1]
        for k, v in values.items():
            if last[k] is not None:
                raise ValueError(f"column {k} of step {last['step']} already set")
            last[k] = v

    def to_csv(self, include_time: bool = False) -> str:
        cols = [c for c in COLUMNS if include_time or c != "wall_time"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])
        return buf.getvalue()


@dataclass
class Run:
    config: TrainConfig
    data: Dataset
    executor: GraphExecutor
    loss: object
    input_shape: tuple

    def reshape(self, x):
        return x.reshape((x.shape[0],) + self.input_shape)


def make_run(config: TrainConfig, data: Dataset | None = None) -> Run:
    data = data if data is not None else load_dataset(config.dataset, config.eval_fraction)
    if config.loss == "ce" and data.num_classes == 0:
        raise ConfigError("cross-entropy needs class labels; use loss = mse for regression data")
    if config.loss == "ce":
        outputs = data.num_classes
    else:
        outputs = data.y_train.shape[1] if data.y_train.ndim == 2 else 1
    shape = infer_input_shape(config.model, data.num_features, config.input_shape)
    layers = build_model(config.model, shape, outputs, config.seed, config.bn_dual_copy)
    est = GradMagEstimator(config.estimator, config.ema_decay, warm_start=config.warm_start)
    ex = GraphExecutor(layers, config.group_size, config.seed, est, input_shape=shape)
    apply_level(ex, config.level, config.bits)
    loss = CrossEntropyLoss() if config.loss == "ce" else MSELoss()
    return Run(config, data, ex, loss, shape)


def allocated_bits(executor: GraphExecutor) -> tuple:
    """Average bits per quantized element this step, without and with group metadata."""
    payload = meta = elems = 0
    for i in executor.quantized_layers():
        layer = executor.layers[i]
        for ctx in _packed(layer):
            payload += ctx.payload_bits
            meta += ctx.metadata_bits
            elems += ctx.num_samples * ctx.dim
    if elems == 0:
        return None, None
    return payload / elems, (payload + meta) / elems


def _packed(layer):
    ctx = layer.ctx
    cands = [ctx.x, ctx.x_dot] if hasattr(ctx, "x_dot") else [ctx]
    return [c for c in cands if isinstance(c, PackedActivation)]


def train_step(run: Run, xb, yb, ids):
    cfg = run.config
    ex = run.executor
    out = ex.forward(run.reshape(xb), ids)
    loss = run.loss.forward(out, yb)
    bits = allocated_bits(ex)
    grads = ex.backward(run.loss.backward())
    ex.update_estimator(ids)
    if cfg.level == "L3":
        ex.reallocate(cfg.bits, cfg.normalize_greedy)
    ex.sgd_step(grads, cfg.lr)
    return loss, bits


def evaluate(run: Run):
    d = run.data
    if len(d.x_eval) == 0:
        return None, None
    out = run.executor.predict(run.reshape(d.x_eval))
    loss = type(run.loss)().forward(out, d.y_eval)
    acc = accuracy(out, d.y_eval) if run.config.loss == "ce" else None
    return loss, acc


def train(config: TrainConfig, data: Dataset | None = None, run: Run | None = None) -> MetricsLog:
    run = run or make_run(config, data)
    d = run.data
    n = len(d.x_train)
    if n == 0:
        raise ConfigError("training split is empty")
    log = MetricsLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for s in range(0, n, config.batch_size):
            ids = np.sort(order[s:s + config.batch_size])
            xb, yb = d.x_train[ids], d.y_train[ids]
            var = None
            if config.variance_every and step % config.variance_every == 0:
                var = empirical_variance(run.executor, type(run.loss)(), run.reshape(xb), yb,
                                         config.variance_trials, ids).total()
            loss, (bits, bits_meta) = train_step(run, xb, yb, ids)
            step += 1
            log.append(step=step, epoch=epoch, loss=loss, grad_variance=var, avg_bits=bits,
                       avg_bits_with_metadata=bits_meta, wall_time=time.perf_counter() - start)
        eval_loss, acc = evaluate(run)
        if log.rows:
            log.update_last(eval_loss=eval_loss, eval_accuracy=acc)
    return log
