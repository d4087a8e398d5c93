"""Exact activation-memory accounting for one training batch."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..quantize import PackedActivation
from .config import TrainConfig
from .levels import apply_level
from .train import Run, make_run

HEADER_BYTES = 4 + 1 + 12  # magic, version, (G, N, D)


@dataclass
class LayerMemory:
    index: int
    kind: str
    elements: int  # saved activation elements
    fp_bits: int
    payload_bits: int
    metadata_bits: int
    compressed_bits: int  # payload + metadata, or raw bits for non-quantized contexts
    serialized_bits: int  # 8 * bytes of every serialized PackedActivation (0 if none)

    @property
    def bits_per_element(self) -> float:
        return self.compressed_bits / self.elements if self.elements else 0.0

    @property
    def fp_bits_per_element(self) -> float:
        return self.fp_bits / self.elements if self.elements else 0.0


@dataclass
class MemoryReport:
    layers: list = field(default_factory=list)
    level: str = "L0"
    bits: float = 32.0

    @property
    def fp_total(self) -> int:
        return sum(r.fp_bits for r in self.layers)

    @property
    def compressed_total(self) -> int:
        return sum(r.compressed_bits for r in self.layers)

    @property
    def ratio(self) -> float:
        return self.fp_total / self.compressed_total if self.compressed_total else float("inf")

    @property
    def stacked_bits_per_element(self) -> float:
        """Sum of per-layer bits per element (5.25 for a 2-bit Conv-BN-ReLU block)."""
        return float(sum(r.bits_per_element for r in self.layers))

    @property
    def stacked_fp_bits_per_element(self) -> float:
        return float(sum(r.fp_bits_per_element for r in self.layers))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "elements", "fp_bits", "payload_bits", "metadata_bits",
                    "compressed_bits", "serialized_bits", "bits_per_element"])
        for r in self.layers:
            w.writerow([r.index, r.kind, r.elements, r.fp_bits, r.payload_bits, r.metadata_bits,
                        r.compressed_bits, r.serialized_bits, f"{r.bits_per_element:.6f}"])
        w.writerow(["total", "", "", self.fp_total, sum(r.payload_bits for r in self.layers),
                    sum(r.metadata_bits for r in self.layers), self.compressed_total,
                    sum(r.serialized_bits for r in self.layers), f"{self.stacked_bits_per_element:.6f}"])
        w.writerow(["ratio", "", "", "", "", "", "", "", f"{self.ratio:.6f}"])
        return buf.getvalue()


def _contexts(layer):
    ctx = layer.ctx
    if hasattr(ctx, "x_dot"):
        return [c for c in (ctx.x, ctx.x_dot) if c is not None]
    return [ctx]


def account(executor) -> list:
    """Bits held by every layer's current saved context."""
    rows = []
    for i, layer in enumerate(executor.layers):
        payload = meta = serialized = 0
        for c in _contexts(layer):
            if isinstance(c, PackedActivation):
                payload += c.payload_bits
                meta += c.metadata_bits
                serialized += 8 * len(c.serialize())
        rows.append((i, layer.kind, layer.context_elements(), layer.context_bits(),
                     payload, meta, serialized))
    return rows


def memory_report(config: TrainConfig, run: Run | None = None) -> MemoryReport:
    """Account one batch of ``batch_size`` training samples.

    At L3 one adaptation round (forward, backward, estimator update, stage-2
    re-solve, no parameter update) runs first so the budgets are the adapted
    ones. Full-precision bits come from the same batch at L0.
    """
    run = run or make_run(config)
    ex = run.executor
    d = run.data
    ids = np.arange(min(config.batch_size, len(d.x_train)))
    x, y = run.reshape(d.x_train[ids]), d.y_train[ids]

    apply_level(ex, "L0", config.bits)
    ex.forward(x, ids)
    fp = account(ex)

    apply_level(ex, config.level, config.bits)
    if config.level == "L3":
        out = ex.forward(x, ids)
        if out.ndim == 2 and _loss_fits(run, out, y):
            run.loss.forward(out, y)
            g = run.loss.backward()
        else:
            g = np.random.default_rng(config.seed).standard_normal(out.shape).astype(out.dtype)
        ex.backward(g)
        ex.update_estimator(ids)
        ex.reallocate(config.bits, config.normalize_greedy)
    ex.forward(x, ids)
    comp = account(ex)
    layers = [LayerMemory(i, kind, elems, fp_row[3], payload, meta, bits, ser)
              for fp_row, (i, kind, elems, bits, payload, meta, ser) in zip(fp, comp)]
    return MemoryReport(layers, config.level, config.bits)


def _loss_fits(run, out, y):
    if run.config.loss == "ce":
        return y.ndim == 1 and out.shape[1] > int(np.max(y))
    return np.size(y) == out.size
