"""Straight-line reverse-mode executor with compressed contexts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import allocator
from .layers import Layer
from .quantize import DEFAULT_GROUP_SIZE, QuantRng, measure_group_ranges, quantize_tensor


@dataclass(frozen=True)
class LayerPolicy:
    """How one layer saves its context.

    ``compress`` False keeps full precision. For quantizable layers ``bits`` is
    the target average width; ``per_sample`` lets the allocator spread the
    layer budget across samples. For ReLU, ``compress`` selects the packed
    1-bit mask.
    """

    compress: bool = False
    bits: float = 32.0
    per_sample: bool = False
    adaptive: bool = False  # layer budget is re-solved after every backward

    @staticmethod
    def fp() -> "LayerPolicy":
        return LayerPolicy()


class _Saver:
    def __init__(self, executor: "GraphExecutor", index: int, sample_ids):
        self.ex = executor
        self.index = index
        self.sample_ids = sample_ids
        self._bits = None

    def lossless(self, layer) -> bool:
        return self.ex.policy[self.index].compress

    def save(self, layer: Layer, h, stream=0):
        ex = self.ex
        pol = ex.policy[self.index]
        if not pol.compress:
            return h
        if self._bits is None:
            n = h.shape[0]
            _, range_norms = measure_group_ranges(h, ex.group_size)
            grad_sq = ex.estimator.estimate(self.index, self.sample_ids, n)
            stats = layer.sensitivity(grad_sq, range_norms, ex.group_size, h.shape[1:])
            ex.stats[self.index] = stats
            if pol.per_sample:
                budget = ex.layer_budget(self.index, n)
                self._bits = allocator.allocate_per_sample(stats.weights, budget)
            else:
                self._bits = np.full(n, int(pol.bits), dtype=np.int64)
            ex.bits[self.index] = self._bits
        rng = QuantRng(ex.seed, ex.step, self.index, stream)
        return quantize_tensor(h, self._bits, ex.group_size, rng)


class GraphExecutor:
    """Runs a chain of layers forward and backward.

    ``policy[i]`` controls what layer ``i`` keeps for backward. The step
    counter advances on every training forward and, together with the seed,
    the layer index and a stream id, keys every quantization draw.
    """

    def __init__(self, layers, group_size: int = DEFAULT_GROUP_SIZE, seed: int = 0,
                 estimator: allocator.GradMagEstimator | None = None, input_shape=None):
        self.layers: list[Layer] = list(layers)
        self.group_size = int(group_size)
        self.seed = int(seed)
        self.step = 0
        self.estimator = estimator or allocator.GradMagEstimator()
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.policy = [LayerPolicy.fp() for _ in self.layers]
        self.layer_avg_bits: dict[int, float] = {}
        self.stats: dict = {}
        self.bits: dict = {}
        self.grad_sq: dict = {}
        self._output_shape = None
        self._batch = 0

    # -- configuration -----------------------------------------------------

    @property
    def mode(self) -> str:
        return "compressed" if any(p.compress for p in self.policy) else "fp"

    def set_policy(self, policy):
        policy = list(policy)
        if len(policy) != len(self.layers):
            raise ValueError(f"{len(policy)} policies for {len(self.layers)} layers")
        self.policy = policy
        self.layer_avg_bits = {i: float(p.bits) for i, p in enumerate(policy)
                               if p.compress and self.layers[i].quantizable}

    def quantized_layers(self) -> list[int]:
        return [i for i, (l, p) in enumerate(zip(self.layers, self.policy)) if l.quantizable and p.compress]

    def layer_budget(self, index: int, num_samples: int) -> int:
        avg = self.layer_avg_bits.get(index, self.policy[index].bits)
        budget = int(np.floor(avg * num_samples + 1e-9))
        return int(np.clip(budget, allocator.B_MIN * num_samples, allocator.B_MAX * num_samples))

    # -- passes --------------------------------------------------------------

    def forward(self, x, sample_ids=None):
        x = np.asarray(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match expected {self.input_shape}")
        self.stats = {}
        self.bits = {}
        self.step += 1
        h = x
        for i, layer in enumerate(self.layers):
            try:
                h = layer.forward(h, _Saver(self, i, sample_ids))
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer!r}): {e}") from e
        self._output_shape = h.shape
        self._batch = x.shape[0]
        return h

    def predict(self, x):
        h = np.asarray(x)
        for i, layer in enumerate(self.layers):
            try:
                h = layer.predict(h)
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer!r}): {e}") from e
        return h

    def backward(self, output_grad):
        if self._output_shape is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(output_grad)
        if g.shape != self._output_shape:
            raise ValueError(f"output gradient shape {g.shape} != output shape {self._output_shape}")
        self.grad_sq = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.quantizable:
                self.grad_sq[i] = (g.reshape(g.shape[0], -1).astype(np.float64) ** 2).sum(axis=1)
            g = layer.backward(g)
        self._output_shape = None
        return [list(layer.grads) if layer.param_names else [] for layer in self.layers]

    def sgd_step(self, gradients, learning_rate: float):
        if learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        for layer, grads in zip(self.layers, gradients):
            for p, g in zip(layer.params, grads):
                if p.shape != np.shape(g):
                    raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
                p -= (learning_rate * g).astype(p.dtype, copy=False)
        return [layer.params for layer in self.layers]

    # -- adaptation ----------------------------------------------------------

    def update_estimator(self, sample_ids=None):
        for i, sq in self.grad_sq.items():
            if self.policy[i].compress:
                self.estimator.update(i, sq, sample_ids)

    def reallocate(self, avg_bits: float, normalize: bool = True):
        """Joint re-solve over all adaptive layers; sets next step's layer budgets."""
        idx = [i for i in self.quantized_layers() if self.policy[i].adaptive and i in self.stats]
        if not idx:
            return None
        n = self.stats[idx[0]].weights.size
        w = np.stack([self.stats[i].weights for i in idx])
        dims = np.array([self.stats[i].dim for i in idx])
        total = int(np.floor(avg_bits * n * dims.sum() + 1e-9))
        sums, alloc = allocator.allocate_per_layer(w, dims, total, normalize=normalize)
        for i, s in zip(idx, sums):
            self.layer_avg_bits[i] = float(s) / n
        return alloc

    def astype(self, dtype):
        for layer in self.layers:
            layer.to(dtype)
        return self

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]


class MSELoss:
    """0.5 * mean over samples of ||y_n - t_n||^2."""

    def forward(self, y, target):
        self._diff = y - np.asarray(target, dtype=y.dtype).reshape(y.shape)
        return float(0.5 * (self._diff.astype(np.float64) ** 2).sum() / y.shape[0])

    def backward(self):
        return self._diff / self._diff.shape[0]


class CrossEntropyLoss:
    """Softmax cross-entropy averaged over the batch; labels are class indices."""

    def forward(self, logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self._labels = np.asarray(labels, dtype=np.int64)
        self._prob = np.exp(logp)
        return float(-logp[np.arange(len(self._labels)), self._labels].astype(np.float64).mean())

    def backward(self):
        g = self._prob.copy()
        g[np.arange(len(self._labels)), self._labels] -= 1
        return g / len(self._labels)


def accuracy(logits, labels) -> float:
    return float((np.argmax(logits, axis=1) == np.asarray(labels)).mean())


def sgd_step(executor: GraphExecutor, gradients, learning_rate: float):
    return executor.sgd_step(gradients, learning_rate)
