"""Per-group stochastic quantization and bit-exact packing of activations.

A tensor with a leading sample axis is viewed as ``(N, D)``. Each sample's
``D`` features are cut into contiguous groups of ``group_size`` (the last
group of a sample may be shorter; groups never span samples). Every group
stores its range and zero point as bfloat16 and its elements as
``b_n``-bit unsigned codes, where ``b_n`` is the bit width chosen for
sample ``n``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

DEFAULT_GROUP_SIZE = 256
MIN_BITS = 1
MAX_BITS = 8
METADATA_BITS_PER_GROUP = 32

MAGIC = b"ACTN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<III")


# ---------------------------------------------------------------------------
# bfloat16
# ---------------------------------------------------------------------------

def _f32_bits(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)


def bf16_round_down(x) -> np.ndarray:
    """bfloat16 bit patterns of ``x`` rounded toward -inf."""
    u = _f32_bits(x)
    t = u & np.uint32(0xFFFF0000)
    inexact = (u & np.uint32(0xFFFF)) != 0
    negative = (u & np.uint32(0x80000000)) != 0
    t = np.where(inexact & negative, t + np.uint32(0x10000), t)
    return (t >> np.uint32(16)).astype(np.uint16)


def bf16_round_up(x) -> np.ndarray:
    """bfloat16 bit patterns of ``x`` rounded toward +inf."""
    u = _f32_bits(x)
    t = u & np.uint32(0xFFFF0000)
    inexact = (u & np.uint32(0xFFFF)) != 0
    negative = (u & np.uint32(0x80000000)) != 0
    t = np.where(inexact & ~negative, t + np.uint32(0x10000), t)
    return (t >> np.uint32(16)).astype(np.uint16)


def bf16_to_float(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return b.view(np.float32)


def _f64_to_f32_up(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    f = x.astype(np.float32)
    return np.where(f.astype(np.float64) < x, np.nextafter(f, np.float32(np.inf)), f)


def _encode_meta(mins, maxs):
    """bf16 (range, zero) such that every value lies in [Z, Z + R]."""
    z_bits = bf16_round_down(np.asarray(mins, dtype=np.float32))
    z = bf16_to_float(z_bits).astype(np.float64)
    span = np.asarray(maxs, dtype=np.float64) - z
    r_bits = bf16_round_up(_f64_to_f32_up(np.maximum(span, 0.0)))
    return r_bits, z_bits


# ---------------------------------------------------------------------------
# RNG handle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantRng:
    """Counter-based RNG handle; the same key always yields the same draws."""

    seed: int = 0
    step: int = 0
    layer: int = 0
    stream: int = 0

    @property
    def key(self) -> int:
        return kernels.derive_key(self.seed, self.step, self.layer, self.stream)

    def uniforms(self, group_index: int, count: int) -> np.ndarray:
        g = np.full(count, group_index, dtype=np.uint64)
        return kernels.uniforms(self.key, g, np.arange(count, dtype=np.uint64))


# ---------------------------------------------------------------------------
# single group
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupMeta:
    range: float
    zero_point: float


def _check_bits(bits) -> None:
    b = np.asarray(bits)
    if b.size and (b.min() < MIN_BITS or b.max() > MAX_BITS):
        raise ValueError(f"bit widths must lie in [{MIN_BITS}, {MAX_BITS}], got {b.tolist()}")


def quantize_group(values, bits: int, rng: QuantRng, group_index: int = 0,
                   value_range: float | None = None, zero_point: float | None = None):
    """Stochastically round one group to ``bits``-bit codes.

    ``value_range``/``zero_point`` override the measured (bfloat16) metadata;
    they are used as given.
    """
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise ValueError("cannot quantize an empty group")
    if not np.all(np.isfinite(v)):
        raise ValueError("group contains non-finite values")
    _check_bits(bits)
    if value_range is None or zero_point is None:
        r_bits, z_bits = _encode_meta(v.min(keepdims=True), v.max(keepdims=True))
        r = float(bf16_to_float(r_bits)[0])
        z = float(bf16_to_float(z_bits)[0])
    else:
        r, z = float(value_range), float(zero_point)
        if r < 0:
            raise ValueError("range must be nonnegative")
    codes = kernels.stochastic_round(
        v, v.size, v.size, np.array([bits], dtype=np.uint8),
        np.array([r]), np.array([z]), rng.key, group_index,
    )
    return codes, GroupMeta(r, z)


def dequantize_group(codes, meta: GroupMeta, bits: int) -> np.ndarray:
    c = np.asarray(codes)
    _check_bits(bits)
    bins = (1 << bits) - 1
    if c.size and (c.min() < 0 or c.max() > bins):
        raise ValueError(f"code out of range for {bits} bits")
    out = c.astype(np.float64) * meta.range / bins + meta.zero_point
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# bitstream
# ---------------------------------------------------------------------------

def pack_codes(codes, bits: int) -> bytes:
    """LSB-first packing: code k occupies stream bits [k*bits, (k+1)*bits)."""
    c = np.asarray(codes, dtype=np.int64).ravel()
    _check_bits(bits)
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise ValueError(f"codes do not fit in {bits} bits")
    widths = np.full(c.size, bits, dtype=np.uint8)
    return kernels.pack_bits(c.astype(np.uint8), widths).tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    _check_bits(bits)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size * 8 < bits * count:
        raise ValueError(f"truncated stream: need {bits * count} bits, have {buf.size * 8}")
    return kernels.unpack_bits(buf, np.full(count, bits, dtype=np.uint8))


# ---------------------------------------------------------------------------
# whole tensors
# ---------------------------------------------------------------------------

@dataclass
class PackedActivation:
    group_size: int
    bits: np.ndarray  # uint8, one per sample
    ranges: np.ndarray  # uint16 bf16 patterns, sample-major group order
    zeros: np.ndarray  # uint16 bf16 patterns
    payload: np.ndarray  # uint8
    shape: tuple

    @property
    def num_samples(self) -> int:
        return int(self.bits.size)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape[1:], dtype=np.int64)) if len(self.shape) > 1 else 1

    @property
    def groups_per_sample(self) -> int:
        return -(-self.dim // self.group_size)

    @property
    def payload_bits(self) -> int:
        return int(self.bits.astype(np.int64).sum()) * self.dim

    @property
    def metadata_bits(self) -> int:
        return METADATA_BITS_PER_GROUP * int(self.ranges.size)

    @property
    def total_bits(self) -> int:
        return self.payload_bits + self.metadata_bits

    def range_values(self) -> np.ndarray:
        return bf16_to_float(self.ranges)

    def zero_values(self) -> np.ndarray:
        return bf16_to_float(self.zeros)

    def serialize(self) -> bytes:
        meta = np.empty(2 * self.ranges.size, dtype="<u2")
        meta[0::2] = self.ranges
        meta[1::2] = self.zeros
        return b"".join([
            MAGIC,
            bytes([FORMAT_VERSION]),
            _HEADER.pack(self.group_size, self.num_samples, self.dim),
            self.bits.astype(np.uint8).tobytes(),
            meta.tobytes(),
            self.payload.astype(np.uint8).tobytes(),
        ])

    @classmethod
    def deserialize(cls, data: bytes, shape=None) -> "PackedActivation":
        data = bytes(data)
        if data[:4] != MAGIC:
            raise ValueError("bad magic")
        if len(data) < 5 + _HEADER.size or data[4] != FORMAT_VERSION:
            raise ValueError("unsupported version or truncated header")
        group_size, n, dim = _HEADER.unpack_from(data, 5)
        if group_size < 1:
            raise ValueError("group size must be positive")
        off = 5 + _HEADER.size
        bits = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).copy()
        off += n
        _check_bits(bits)
        ngroups = n * -(-dim // group_size)
        meta = np.frombuffer(data, dtype="<u2", count=2 * ngroups, offset=off)
        off += 4 * ngroups
        payload_len = (int(bits.astype(np.int64).sum()) * dim + 7) // 8
        if len(data) - off != payload_len:
            raise ValueError(f"payload length {len(data) - off}, expected {payload_len}")
        payload = np.frombuffer(data, dtype=np.uint8, offset=off).copy()
        if shape is None:
            shape = (n, dim)
        elif int(np.prod(shape)) != n * dim or shape[0] != n:
            raise ValueError(f"shape {shape} does not match {n} x {dim}")
        return cls(group_size, bits, meta[0::2].astype(np.uint16), meta[1::2].astype(np.uint16),
                   payload, tuple(shape))


def _group_starts(n: int, dim: int, group_size: int) -> np.ndarray:
    within = np.arange(0, dim, group_size, dtype=np.int64)
    return (np.arange(n, dtype=np.int64)[:, None] * dim + within[None, :]).ravel()


def _as_samples(t) -> np.ndarray:
    x = np.asarray(t, dtype=np.float32)
    if x.ndim == 0:
        raise ValueError("tensor needs a leading sample axis")
    return x.reshape(x.shape[0], -1)


def measure_group_ranges(t, group_size: int = DEFAULT_GROUP_SIZE):
    """Exact per-group ranges (N, groups) and per-sample sums of squared ranges."""
    x = _as_samples(t)
    n, dim = x.shape
    if n * dim == 0:
        return np.zeros((n, 0)), np.zeros(n)
    starts = _group_starts(n, dim, group_size)
    flat = x.ravel()
    ranges = (np.maximum.reduceat(flat, starts).astype(np.float64)
              - np.minimum.reduceat(flat, starts).astype(np.float64))
    ranges = ranges.reshape(n, -1)
    return ranges, (ranges ** 2).sum(axis=1)


def quantize_tensor(t, bits_per_sample, group_size: int = DEFAULT_GROUP_SIZE,
                    rng: QuantRng | None = None) -> PackedActivation:
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    x = _as_samples(t)
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    n, dim = x.shape
    bits = np.broadcast_to(np.asarray(bits_per_sample, dtype=np.int64), (n,))
    _check_bits(bits)
    bits = bits.astype(np.uint8)
    rng = rng or QuantRng()
    starts = _group_starts(n, dim, group_size)
    flat = x.ravel()
    if flat.size:
        r_bits, z_bits = _encode_meta(np.minimum.reduceat(flat, starts),
                                      np.maximum.reduceat(flat, starts))
    else:
        r_bits = z_bits = np.zeros(0, dtype=np.uint16)
    codes = kernels.stochastic_round(
        flat, max(dim, 1), group_size, bits,
        bf16_to_float(r_bits).astype(np.float64), bf16_to_float(z_bits).astype(np.float64),
        rng.key,
    )
    payload = kernels.pack_bits(codes, np.repeat(bits, dim))
    return PackedActivation(group_size, bits, r_bits, z_bits, payload, tuple(np.shape(t)))


def dequantize_tensor(p: PackedActivation) -> np.ndarray:
    n, dim = p.num_samples, p.dim
    widths = np.repeat(p.bits, dim)
    codes = kernels.unpack_bits(p.payload, widths)
    e = np.arange(n * dim, dtype=np.int64)
    s = e // max(dim, 1)
    g = s * p.groups_per_sample + (e - s * dim) // p.group_size
    bins = ((1 << p.bits.astype(np.int64)) - 1)[s].astype(np.float64)
    r = p.range_values().astype(np.float64)[g]
    z = p.zero_values().astype(np.float64)[g]
    out = codes.astype(np.float64) * r / bins + z
    return out.astype(np.float32).reshape(p.shape)


def expected_variance(p: PackedActivation) -> np.ndarray:
    """Per-element quantization variance R^2 / (6 B^2) under uniform fractions."""
    n, dim = p.num_samples, p.dim
    e = np.arange(n * dim, dtype=np.int64)
    s = e // max(dim, 1)
    g = s * p.groups_per_sample + (e - s * dim) // p.group_size
    bins = ((1 << p.bits.astype(np.int64)) - 1)[s].astype(np.float64)
    r = p.range_values().astype(np.float64)[g]
    return (r ** 2 / (6.0 * bins ** 2)).reshape(p.shape)
