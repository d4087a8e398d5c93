"""Layers with compressible backward contexts.

Each layer's ``forward`` hands the tensor it needs for backward to a *saver*
(supplied by the executor); the saver returns either the tensor itself or
a :class:`~actcompress.quantize.PackedActivation`. ``backward`` only ever reads
what was saved. With no saver the layer keeps full-precision contexts.

Weights and per-feature statistics always stay in full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantize import PackedActivation, dequantize_tensor

BN_EPS = 1e-5
MAX_POOL_KERNEL_ELEMENTS = 256


class ContextError(RuntimeError):
    """Backward was called without a saved context."""


@dataclass
class SensitivityStats:
    weights: np.ndarray  # w_n, one per sample
    range_norms: np.ndarray  # sum_i R_ni^2
    grad_sq: np.ndarray  # estimated ||grad_n||^2
    dim: int  # features per sample of the saved activation


def linear_sensitivity(grad_sq, range_norms, group_size):
    """w_n = (G/6) ||grad_n||^2 ||R_n||^2."""
    return (group_size / 6.0) * np.asarray(grad_sq, dtype=np.float64) * np.asarray(range_norms, dtype=np.float64)


def conv2d_sensitivity(grad_sq, range_norms, group_size, kernel_locations, input_locations, groups=1):
    """w_n = G K / (6 I A) ||grad_y_n||^2 ||R_n||^2 (sum*mean approximation over locations)."""
    scale = group_size * kernel_locations / (6.0 * input_locations * groups)
    return scale * np.asarray(grad_sq, dtype=np.float64) * np.asarray(range_norms, dtype=np.float64)


def batchnorm_sensitivity(range_norms, scale=1.0):
    """w_n = scale * ||R_n||^2; gradient-dependent factors collapse into ``scale``."""
    return float(scale) * np.asarray(range_norms, dtype=np.float64)


def restore(ctx, dtype=np.float32):
    if ctx is None:
        raise ContextError("no saved context; call forward first")
    if isinstance(ctx, PackedActivation):
        return dequantize_tensor(ctx).astype(dtype, copy=False)
    return ctx


def context_bits(ctx) -> int:
    """Exact storage of one saved activation in bits."""
    if ctx is None:
        return 0
    if isinstance(ctx, PackedActivation):
        return ctx.total_bits
    return 32 * int(np.size(ctx))


def _pair(v):
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


class Layer:
    kind = "layer"
    quantizable = False  # stores an activation that the allocator may quantize

    def __init__(self):
        self.param_names: tuple[str, ...] = ()
        self.grads: list[np.ndarray] = []
        self.ctx = None

    @property
    def params(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.param_names]

    def to(self, dtype):
        for name in self.param_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def forward(self, x, saver=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def predict(self, x):
        y = self.forward(x)
        self.ctx = None
        return y

    def output_shape(self, input_shape):
        return tuple(self.predict(np.zeros((1,) + tuple(input_shape), dtype=np.float32)).shape[1:])

    def sensitivity(self, grad_sq, range_norms, group_size, sample_shape) -> SensitivityStats:
        raise NotImplementedError(f"{self.kind} has no quantized context")

    def context_bits(self) -> int:
        return 0

    def context_elements(self) -> int:
        return 0

    def clear(self):
        self.ctx = None

    def _save(self, saver, x, stream=0):
        return x if saver is None else saver.save(self, x, stream)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Linear(Layer):
    """y = x @ W (+ b), W of shape (in_features, out_features)."""

    kind = "linear"
    quantizable = True

    def __init__(self, in_features, out_features, bias=False, weight=None, rng=None):
        super().__init__()
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = np.sqrt(6.0 / in_features)
            weight = rng.uniform(-bound, bound, (in_features, out_features))
        self.weight = np.asarray(weight, dtype=np.float32)
        if self.weight.shape != (in_features, out_features):
            raise ValueError(f"weight shape {self.weight.shape} != {(in_features, out_features)}")
        self.param_names = ("weight",)
        self.bias = None
        if bias:
            self.bias = np.zeros(out_features, dtype=np.float32)
            self.param_names = ("weight", "bias")

    def forward(self, x, saver=None):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"linear expects (N, {self.weight.shape[0]}), got {x.shape}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        self.ctx = self._save(saver, x)
        return y

    def backward(self, grad_out):
        x = restore(self.ctx, grad_out.dtype)
        self.grads = [x.T @ grad_out]
        if self.bias is not None:
            self.grads.append(grad_out.sum(axis=0))
        return grad_out @ self.weight.T

    def sensitivity(self, grad_sq, range_norms, group_size, sample_shape):
        dim = int(np.prod(sample_shape))
        w = linear_sensitivity(grad_sq, range_norms, min(group_size, dim))
        return SensitivityStats(w, np.asarray(range_norms), np.asarray(grad_sq), dim)

    def context_bits(self):
        return context_bits(self.ctx)

    def context_elements(self):
        return int(np.prod(self.ctx.shape)) if self.ctx is not None else 0

    def __repr__(self):
        return f"Linear({self.weight.shape[0]}, {self.weight.shape[1]})"


class Conv2d(Layer):
    """Cross-correlation over NCHW input; weight (out, in/groups, kh, kw), no bias."""

    kind = "conv2d"
    quantizable = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, groups=1,
                 weight=None, rng=None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ValueError("groups must divide both channel counts")
        self.kernel = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        if min(self.stride) < 1:
            raise ValueError("stride must be >= 1")
        self.groups = groups
        shape = (out_channels, in_channels // groups) + self.kernel
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            weight = rng.uniform(-bound, bound, shape)
        self.weight = np.asarray(weight, dtype=np.float32)
        if self.weight.shape != shape:
            raise ValueError(f"weight shape {self.weight.shape} != {shape}")
        self.param_names = ("weight",)

    def _windows(self, x):
        ph, pw = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        sh, sw = self.stride
        win = sliding_window_view(xp, self.kernel, axis=(2, 3))[:, :, ::sh, ::sw]
        n, c, ho, wo = win.shape[:4]
        a = self.groups
        return win.reshape(n, a, c // a, ho, wo, *self.kernel)

    def forward(self, x, saver=None):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1] * self.groups:
            raise ValueError(f"conv2d expects (N, {self.weight.shape[1] * self.groups}, H, W), got {x.shape}")
        kh, kw = self.kernel
        if x.shape[2] + 2 * self.padding[0] < kh or x.shape[3] + 2 * self.padding[1] < kw:
            raise ValueError("kernel larger than padded input")
        win = self._windows(x)
        a = self.groups
        w = self.weight.reshape(a, -1, *self.weight.shape[1:])
        y = np.einsum("nacijpq,aocpq->naoij", win, w, optimize=True)
        n, _, _, ho, wo = y.shape
        self.ctx = self._save(saver, x)
        return y.reshape(n, -1, ho, wo)

    def backward(self, grad_out):
        x = restore(self.ctx, grad_out.dtype)
        win = self._windows(x)
        a = self.groups
        n, _, ho, wo = grad_out.shape
        gy = grad_out.reshape(n, a, -1, ho, wo)
        gw = np.einsum("naoij,nacijpq->aocpq", gy, win, optimize=True)
        self.grads = [gw.reshape(self.weight.shape)]
        w = self.weight.reshape(a, -1, *self.weight.shape[1:])
        gwin = np.einsum("naoij,aocpq->nacijpq", gy, w, optimize=True)
        gwin = gwin.reshape(n, -1, ho, wo, *self.kernel)
        ph, pw = self.padding
        sh, sw = self.stride
        _, c, h, wd = x.shape
        gx = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gwin.dtype)
        for p in range(self.kernel[0]):
            for q in range(self.kernel[1]):
                gx[:, :, p:p + sh * (ho - 1) + 1:sh, q:q + sw * (wo - 1) + 1:sw] += gwin[..., p, q]
        return gx[:, :, ph:ph + h, pw:pw + wd]

    def sensitivity(self, grad_sq, range_norms, group_size, sample_shape):
        dim = int(np.prod(sample_shape))
        k = self.kernel[0] * self.kernel[1]
        locations = int(sample_shape[1] * sample_shape[2])
        w = conv2d_sensitivity(grad_sq, range_norms, min(group_size, dim), k, locations, self.groups)
        return SensitivityStats(w, np.asarray(range_norms), np.asarray(grad_sq), dim)

    def context_bits(self):
        return context_bits(self.ctx)

    def context_elements(self):
        return int(np.prod(self.ctx.shape)) if self.ctx is not None else 0

    def __repr__(self):
        o, i, kh, kw = self.weight.shape
        return f"Conv2d({i * self.groups}, {o}, ({kh}, {kw}), stride={self.stride}, padding={self.padding})"


@dataclass
class ReluMask:
    bits: np.ndarray  # LSB-first packed mask
    shape: tuple


class ReLU(Layer):
    """Lossless 1-bit context. Without compression the context is the output
    itself, which the next layer already keeps, so it costs nothing extra."""

    kind = "relu"

    def forward(self, x, saver=None):
        mask = x > 0
        y = np.where(mask, x, np.zeros((), dtype=x.dtype))
        if saver is not None and saver.lossless(self):
            self.ctx = ReluMask(np.packbits(mask.ravel(), bitorder="little"), x.shape)
        else:
            self.ctx = y
        return y

    def _mask(self):
        if self.ctx is None:
            raise ContextError("no saved context; call forward first")
        if isinstance(self.ctx, ReluMask):
            n = int(np.prod(self.ctx.shape))
            return np.unpackbits(self.ctx.bits, count=n, bitorder="little").astype(bool).reshape(self.ctx.shape)
        return self.ctx > 0

    def backward(self, grad_out):
        mask = self._mask()
        if mask.shape != grad_out.shape:
            raise ValueError(f"mask shape {mask.shape} != gradient shape {grad_out.shape}")
        return np.where(mask, grad_out, np.zeros((), dtype=grad_out.dtype))

    def context_bits(self):
        if isinstance(self.ctx, ReluMask):
            return int(np.prod(self.ctx.shape))
        return 0

    def context_elements(self):
        if self.ctx is None:
            return 0
        return int(np.prod(self.ctx.shape))


@dataclass
class BatchNormContext:
    x: object  # ndarray or PackedActivation
    x_dot: object  # second independent copy (dual-copy mode) or None
    mean: np.ndarray
    std: np.ndarray


class BatchNorm(Layer):
    """Normalizes each channel over all non-channel axes of (N, C) or (N, C, H, W) input.

    ``dual_copy=True`` keeps two independently quantized copies of the input,
    which makes the input gradient unbiased; the default single copy has a
    bias of order Var[x_hat] / N.
    """

    kind = "batchnorm"
    quantizable = True

    def __init__(self, num_features, momentum=0.1, dual_copy=False, eps=BN_EPS):
        super().__init__()
        self.weight = np.ones(num_features, dtype=np.float32)
        self.bias = np.zeros(num_features, dtype=np.float32)
        self.param_names = ("weight", "bias")
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)
        self.momentum = momentum
        self.dual_copy = dual_copy
        self.eps = eps
        self._batch_var = 1.0

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.weight.size:
            raise ValueError(f"batchnorm expects (N, {self.weight.size}[, H, W]), got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, saver=None):
        axes = self._axes(x)
        mean = x.mean(axis=axes, dtype=np.float64)
        std = np.sqrt(((x - self._bcast(mean, x.ndim)) ** 2).mean(axis=axes))
        if np.any(std <= self.eps):
            raise ValueError(f"degenerate batch statistics: channel std <= {self.eps}")
        self._batch_var = float((std ** 2).mean())
        mean = mean.astype(x.dtype)
        std = std.astype(x.dtype)
        y = (x - self._bcast(mean, x.ndim)) * self._bcast(self.weight / std, x.ndim) + self._bcast(self.bias, x.ndim)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * std ** 2).astype(np.float32)
        xh = self._save(saver, x, 0)
        xd = self._save(saver, x, 1) if self.dual_copy else None
        self.ctx = BatchNormContext(xh, xd, mean, std)
        return y.astype(x.dtype, copy=False)

    def predict(self, x):
        self._axes(x)
        scale = self.weight / np.sqrt(self.running_var + self.eps)
        return ((x - self._bcast(self.running_mean, x.ndim)) * self._bcast(scale, x.ndim)
                + self._bcast(self.bias, x.ndim)).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        ctx = self.ctx
        if ctx is None:
            raise ContextError("no saved context; call forward first")
        nd = grad_out.ndim
        axes = self._axes(grad_out)
        count = grad_out.size // grad_out.shape[1]
        m = self._bcast(ctx.mean, nd)
        s = self._bcast(ctx.std, nd)
        xc = restore(ctx.x, grad_out.dtype) - m
        xc_dot = restore(ctx.x_dot, grad_out.dtype) - m if ctx.x_dot is not None else xc
        gb = grad_out.sum(axis=axes)
        gw = (grad_out * xc).sum(axis=axes) / ctx.std
        self.grads = [gw.astype(grad_out.dtype), gb.astype(grad_out.dtype)]
        proj = self._bcast((xc_dot * grad_out).sum(axis=axes), nd)
        gmean = self._bcast(grad_out.mean(axis=axes), nd)
        w = self._bcast(self.weight, nd).astype(grad_out.dtype)
        return (w / s) * (grad_out - gmean - xc * proj / (count * s ** 2))

    def sensitivity(self, grad_sq, range_norms, group_size, sample_shape):
        # One constant for the whole layer, so per-sample solves only see ||R_n||^2.
        # It puts the weights on the scale of the layer's own-parameter variance,
        # (G / 6D) * mean ||grad_y||^2 / s^2, for comparison against other layers.
        dim = int(np.prod(sample_shape))
        g = min(group_size, dim)
        scale = g * float(np.mean(grad_sq)) / (6.0 * dim * max(self._batch_var, self.eps))
        return SensitivityStats(batchnorm_sensitivity(range_norms, scale), np.asarray(range_norms),
                                np.asarray(grad_sq), dim)

    def context_bits(self):
        if self.ctx is None:
            return 0
        return context_bits(self.ctx.x) + context_bits(self._second_copy())

    def context_elements(self):
        if self.ctx is None:
            return 0
        n = int(np.prod(self.ctx.x.shape))
        return n * (2 if self._second_copy() is not None else 1)

    def _second_copy(self):
        # an unquantized second copy is the same array and costs nothing
        xd = self.ctx.x_dot
        return None if xd is self.ctx.x else xd


@dataclass
class PoolIndices:
    indices: np.ndarray  # uint8 argmax within each window
    input_shape: tuple


class MaxPool2d(Layer):
    """Stores one 8-bit argmax per output location; exact backward."""

    kind = "maxpool"

    def __init__(self, kernel_size, stride=None):
        super().__init__()
        self.kernel = _pair(kernel_size)
        self.stride = _pair(stride if stride is not None else kernel_size)
        if self.kernel[0] * self.kernel[1] > MAX_POOL_KERNEL_ELEMENTS:
            raise ValueError(f"max-pool kernel exceeds {MAX_POOL_KERNEL_ELEMENTS} elements")

    def forward(self, x, saver=None):
        if x.ndim != 4:
            raise ValueError(f"maxpool expects NCHW input, got {x.shape}")
        sh, sw = self.stride
        win = sliding_window_view(x, self.kernel, axis=(2, 3))[:, :, ::sh, ::sw]
        flat = win.reshape(win.shape[:4] + (-1,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self.ctx = PoolIndices(idx.astype(np.uint8), x.shape)
        return y

    def backward(self, grad_out):
        if self.ctx is None:
            raise ContextError("no saved context; call forward first")
        n, c, h, w = self.ctx.input_shape
        _, _, ho, wo = grad_out.shape
        kw = self.kernel[1]
        idx = self.ctx.indices.astype(np.int64)
        rows = np.arange(ho)[:, None] * self.stride[0] + idx // kw
        cols = np.arange(wo)[None, :] * self.stride[1] + idx % kw
        flat = (np.arange(n * c)[:, None, None] * (h * w)).reshape(n, c, 1, 1) + rows * w + cols
        gx = np.zeros(n * c * h * w, dtype=grad_out.dtype)
        np.add.at(gx, flat.ravel(), grad_out.ravel())
        return gx.reshape(n, c, h, w)

    def context_bits(self):
        return 8 * int(self.ctx.indices.size) if self.ctx is not None else 0

    def context_elements(self):
        return int(self.ctx.indices.size) if self.ctx is not None else 0


class AvgPool2d(Layer):
    """Needs nothing but the input shape for backward."""

    kind = "avgpool"

    def __init__(self, kernel_size, stride=None):
        super().__init__()
        self.kernel = _pair(kernel_size)
        self.stride = _pair(stride if stride is not None else kernel_size)

    def forward(self, x, saver=None):
        if x.ndim != 4:
            raise ValueError(f"avgpool expects NCHW input, got {x.shape}")
        sh, sw = self.stride
        win = sliding_window_view(x, self.kernel, axis=(2, 3))[:, :, ::sh, ::sw]
        self.ctx = x.shape
        return win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)

    def backward(self, grad_out):
        if self.ctx is None:
            raise ContextError("no saved context; call forward first")
        n, c, h, w = self.ctx
        _, _, ho, wo = grad_out.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        g = grad_out / (kh * kw)
        gx = np.zeros(self.ctx, dtype=grad_out.dtype)
        for p in range(kh):
            for q in range(kw):
                gx[:, :, p:p + sh * (ho - 1) + 1:sh, q:q + sw * (wo - 1) + 1:sw] += g
        return gx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, saver=None):
        self.ctx = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self.ctx is None:
            raise ContextError("no saved context; call forward first")
        return grad_out.reshape(self.ctx)
