"""Optimization levels mapped onto per-layer context policies.

========  ===============================================================
L0        every context full precision
L1        4-bit per-group quantization on conv layers only
L2        uniform per-group quantization on every quantizable layer,
          1-bit ReLU masks
L2.5      L2 plus per-sample bit allocation inside each layer
L3        L2.5 plus per-layer budget re-solving after every backward
========  ===============================================================
"""

from __future__ import annotations

from ..autograd import GraphExecutor, LayerPolicy
from .config import LEVELS, ConfigError

L1_BITS = 4


def level_policy(layers, level: str, bits: float) -> list[LayerPolicy]:
    if level not in LEVELS:
        raise ConfigError(f"unknown level {level!r}")
    if level in ("L0", "L1", "L2") and float(bits) != int(bits):
        raise ConfigError(f"non-integer bits {bits} need level L2.5 or L3")
    out = []
    for layer in layers:
        if level == "L0":
            out.append(LayerPolicy.fp())
        elif level == "L1":
            conv = layer.kind == "conv2d"
            out.append(LayerPolicy(compress=True, bits=L1_BITS) if conv else LayerPolicy.fp())
        elif layer.quantizable:
            out.append(LayerPolicy(compress=True, bits=float(bits),
                                   per_sample=level in ("L2.5", "L3"), adaptive=level == "L3"))
        elif layer.kind == "relu":
            out.append(LayerPolicy(compress=True, bits=1.0))
        else:
            out.append(LayerPolicy.fp())
    return out


def apply_level(executor: GraphExecutor, level: str, bits: float = 2.0) -> list[LayerPolicy]:
    policy = level_policy(executor.layers, level, bits)
    executor.set_policy(policy)
    return policy
