"""Hot kernels: counter-based uniforms, stochastic rounding, bitstream packing.

Every kernel has a numba version (``nb_*``) and a numpy version (``np_*``).
The public names dispatch to numba unless ``ACTCOMPRESS_DISABLE_NUMBA`` is set.
The two paths produce identical bits; ``tests/test_kernels.py`` checks this.
"""

import numpy as np

from ._accel import HAVE_NUMBA, njit, prange

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_GROUP_STRIDE = 0xD1B54A32D192ED03
_ELEM_STRIDE = 0x8CB92BA72F3D8DD7
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def mix64(x: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    key = 0
    for p in parts:
        key = mix64(key ^ (int(p) & _MASK))
    return key


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _np_mix(z):
    z = z + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def np_uniforms(key, group_index, offset):
    """Uniform [0, 1) draws for (group, offset) pairs under one key."""
    g = np.asarray(group_index, dtype=np.uint64)
    j = np.asarray(offset, dtype=np.uint64)
    gk = _np_mix(np.uint64(key) ^ (g * np.uint64(_GROUP_STRIDE)))
    z = _np_mix(gk + j * np.uint64(_ELEM_STRIDE))
    return (z >> np.uint64(11)).astype(np.float64) * _INV53


def np_stochastic_round(values, dim, group_size, sample_bits, ranges, zeros, key, group_base=0):
    values = np.asarray(values, dtype=np.float32).ravel()
    e = np.arange(values.size, dtype=np.int64)
    n = e // dim
    within = e - n * dim
    gi = within // group_size
    gps = -(-dim // group_size)
    g = n * gps + gi
    j = within - gi * group_size
    bins = (np.left_shift(1, sample_bits.astype(np.int64)) - 1)[n].astype(np.float64)
    r = ranges[g]
    z = zeros[g]
    safe_r = np.where(r > 0.0, r, 1.0)
    u = np.where(r > 0.0, bins * (values.astype(np.float64) - z) / safe_r, 0.0)
    u = np.minimum(np.maximum(u, 0.0), bins)
    fl = np.floor(u)
    draw = np_uniforms(key, g + group_base, j)
    codes = fl + (draw < (u - fl))
    return np.minimum(codes, bins).astype(np.uint8)


def np_pack_bits(codes, widths):
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    widths = np.asarray(widths, dtype=np.uint8).ravel()
    planes = (codes[:, None] >> np.arange(8, dtype=np.uint8)) & np.uint8(1)
    keep = np.arange(8, dtype=np.uint8)[None, :] < widths[:, None]
    return np.packbits(planes[keep], bitorder="little")


def np_unpack_bits(buf, widths):
    widths = np.asarray(widths, dtype=np.int64).ravel()
    stream = np.unpackbits(np.asarray(buf, dtype=np.uint8), bitorder="little")
    start = np.concatenate(([0], np.cumsum(widths)[:-1])) if widths.size else widths
    codes = np.zeros(widths.size, dtype=np.uint8)
    for k in range(8):
        sel = widths > k
        if not sel.any():
            break
        codes[sel] |= (stream[start[sel] + k] << k).astype(np.uint8)
    return codes


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _nb_mix(z):
    z = z + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, parallel=True)
def _nb_stochastic_round(values, dim, group_size, sample_bits, ranges, zeros, key, group_base):
    total = values.size
    nsamples = total // dim
    gps = (dim + group_size - 1) // group_size
    out = np.empty(total, dtype=np.uint8)
    for n in prange(nsamples):
        bins = float((1 << np.int64(sample_bits[n])) - 1)
        for gi in range(gps):
            g = n * gps + gi
            r = ranges[g]
            z = zeros[g]
            gk = _nb_mix(key ^ (np.uint64(g + group_base) * np.uint64(_GROUP_STRIDE)))
            lo = gi * group_size
            hi = min(lo + group_size, dim)
            for w in range(lo, hi):
                e = n * dim + w
                if r > 0.0:
                    u = bins * (np.float64(values[e]) - z) / r
                else:
                    u = 0.0
                if u < 0.0:
                    u = 0.0
                if u > bins:
                    u = bins
                fl = np.floor(u)
                x = _nb_mix(gk + np.uint64(w - lo) * np.uint64(_ELEM_STRIDE))
                draw = np.float64(x >> np.uint64(11)) * _INV53
                c = fl + 1.0 if draw < (u - fl) else fl
                if c > bins:
                    c = bins
                out[e] = np.uint8(c)
    return out


@njit(cache=True)
def _nb_uniforms(key, group_index, offset):
    out = np.empty(group_index.size, dtype=np.float64)
    for i in range(group_index.size):
        gk = _nb_mix(key ^ (np.uint64(group_index[i]) * np.uint64(_GROUP_STRIDE)))
        x = _nb_mix(gk + np.uint64(offset[i]) * np.uint64(_ELEM_STRIDE))
        out[i] = np.float64(x >> np.uint64(11)) * _INV53
    return out


@njit(cache=True)
def _nb_pack_bits(codes, widths):
    total = 0
    for i in range(widths.size):
        total += widths[i]
    out = np.zeros((total + 7) // 8, dtype=np.uint8)
    pos = 0
    for i in range(codes.size):
        w = np.int64(widths[i])
        v = (np.int64(codes[i]) & ((1 << w) - 1)) << (pos & 7)
        b = pos >> 3
        out[b] |= np.uint8(v & 0xFF)
        if (pos & 7) + w > 8:
            out[b + 1] |= np.uint8(v >> 8)
        pos += w
    return out


@njit(cache=True)
def _nb_unpack_bits(buf, widths):
    out = np.empty(widths.size, dtype=np.uint8)
    pos = 0
    nbytes = buf.size
    for i in range(widths.size):
        w = np.int64(widths[i])
        b = pos >> 3
        v = np.int64(buf[b])
        if b + 1 < nbytes:
            v |= np.int64(buf[b + 1]) << 8
        out[i] = np.uint8((v >> (pos & 7)) & ((1 << w) - 1))
        pos += w
    return out


def nb_uniforms(key, group_index, offset):
    g = np.ascontiguousarray(group_index, dtype=np.uint64).ravel()
    j = np.ascontiguousarray(offset, dtype=np.uint64).ravel()
    return _nb_uniforms(np.uint64(key), g, j)


def nb_stochastic_round(values, dim, group_size, sample_bits, ranges, zeros, key, group_base=0):
    return _nb_stochastic_round(
        np.ascontiguousarray(values, dtype=np.float32).ravel(),
        np.int64(dim),
        np.int64(group_size),
        np.ascontiguousarray(sample_bits, dtype=np.uint8),
        np.ascontiguousarray(ranges, dtype=np.float64),
        np.ascontiguousarray(zeros, dtype=np.float64),
        np.uint64(key),
        np.int64(group_base),
    )


def nb_pack_bits(codes, widths):
    return _nb_pack_bits(
        np.ascontiguousarray(codes, dtype=np.uint8).ravel(),
        np.ascontiguousarray(widths, dtype=np.uint8).ravel(),
    )


def nb_unpack_bits(buf, widths):
    return _nb_unpack_bits(
        np.ascontiguousarray(buf, dtype=np.uint8),
        np.ascontiguousarray(widths, dtype=np.uint8).ravel(),
    )


if HAVE_NUMBA:
    uniforms = nb_uniforms
    stochastic_round = nb_stochastic_round
    pack_bits = nb_pack_bits
    unpack_bits = nb_unpack_bits
else:  # pragma: no cover
    uniforms = np_uniforms
    stochastic_round = np_stochastic_round
    pack_bits = np_pack_bits
    unpack_bits = np_unpack_bits
