"""Reference models and a tiny layer-list grammar.

Presets: ``mlp`` (d -> 128 -> k), ``cnn`` (conv3x3(8)-BN-ReLU-maxpool-
conv3x3(16)-BN-ReLU-avgpool to 2x2-linear), ``quadratic`` (one bias-free linear
layer) and ``block`` (conv3x3-BN-ReLU keeping the channel count). Anything
else is read as a whitespace-separated layer list, e.g.
``linear(64,32,bias) bn(32) relu linear(32,10)``.
"""

from __future__ import annotations

import re

import numpy as np

from ..layers import AvgPool2d, BatchNorm, Conv2d, Flatten, Layer, Linear, MaxPool2d, ReLU
from .config import ConfigError

_TOKEN = re.compile(r"\s*([a-z0-9_]+)(?:\(([^)]*)\))?")


def infer_input_shape(model: str, num_features: int, explicit: str = "") -> tuple:
    if explicit:
        try:
            shape = tuple(int(s) for s in explicit.split(","))
        except ValueError:
            raise ConfigError(f"bad input_shape {explicit!r}") from None
        if int(np.prod(shape)) != num_features:
            raise ConfigError(f"input_shape {shape} does not hold {num_features} features")
        return shape
    name = model.split(":")[0].strip()
    if name in ("cnn", "block") or "conv" in model:
        side = int(round(np.sqrt(num_features)))
        if side * side != num_features:
            raise ConfigError(f"cannot infer a square image from {num_features} features; set input_shape")
        return (1, side, side)
    return (num_features,)


def _preset_opts(model):
    name, _, rest = model.partition(":")
    opts = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        k, _, v = item.partition("=")
        opts[k.strip()] = v.strip()
    return name.strip(), opts


def build_model(model: str, input_shape, num_outputs: int, seed: int = 0,
                bn_dual_copy: bool = False) -> list[Layer]:
    rng = np.random.default_rng(seed)
    name, opts = _preset_opts(model)
    shape = tuple(input_shape)
    if name == "mlp":
        hidden = int(opts.get("hidden", 128))
        return [Flatten(), Linear(int(np.prod(shape)), hidden, bias=True, rng=rng), ReLU(),
                Linear(hidden, num_outputs, bias=True, rng=rng)]
    if name == "quadratic":
        return [Flatten(), Linear(int(np.prod(shape)), num_outputs, rng=rng)]
    if name in ("cnn", "block"):
        if len(shape) != 3:
            raise ConfigError(f"{name} needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        if name == "block":
            return [Conv2d(c, c, 3, padding=1, rng=rng), BatchNorm(c, dual_copy=bn_dual_copy), ReLU()]
        c1, c2 = int(opts.get("c1", 8)), int(opts.get("c2", 16))
        if h < 2 or w < 2:
            raise ConfigError("cnn needs images of at least 2x2")
        # average-pool down to a grid of ``grid`` x ``grid`` cells
        grid = int(opts.get("grid", 2))
        pool = (max(1, (h // 2) // grid), max(1, (w // 2) // grid))
        return [
            Conv2d(c, c1, 3, padding=1, rng=rng), BatchNorm(c1, dual_copy=bn_dual_copy), ReLU(),
            MaxPool2d(2),
            Conv2d(c1, c2, 3, padding=1, rng=rng), BatchNorm(c2, dual_copy=bn_dual_copy), ReLU(),
            AvgPool2d(pool), Flatten(),
            Linear(c2 * ((h // 2) // pool[0]) * ((w // 2) // pool[1]), num_outputs, bias=True, rng=rng),
        ]
    return parse_layers(model, rng, bn_dual_copy)


def parse_layers(text: str, rng=None, bn_dual_copy: bool = False) -> list[Layer]:
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"cannot parse model at character {pos}: {text[pos:pos + 20]!r}")
        pos = m.end()
        name, args = m.group(1), m.group(2)
        parts = [a.strip() for a in args.split(",")] if args else []
        flags = {p for p in parts if not p.lstrip("-").isdigit()}
        nums = [int(p) for p in parts if p not in flags]
        try:
            layers.append(_make(name, nums, flags, rng, bn_dual_copy))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad layer {m.group(0).strip()!r}: {e}") from e
    if not layers:
        raise ConfigError("model has no layers")
    return layers


def _make(name, nums, flags, rng, bn_dual_copy):
    if name == "linear":
        return Linear(*nums, bias="bias" in flags, rng=rng)
    if name == "conv":
        # conv(in, out, kernel[, stride[, padding]])
        return Conv2d(*nums, rng=rng)
    if name == "bn":
        return BatchNorm(*nums, dual_copy=bn_dual_copy or "dual" in flags)
    if name == "relu":
        return ReLU()
    if name == "maxpool":
        return MaxPool2d(*nums)
    if name == "avgpool":
        return AvgPool2d(*nums)
    if name == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {name!r}")
