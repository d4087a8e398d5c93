import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actcompress.quantize import (
    GroupMeta, PackedActivation, QuantRng, bf16_round_down, bf16_round_up, bf16_to_float,
    dequantize_group, dequantize_tensor, expected_variance, measure_group_ranges, pack_codes,
    quantize_group, quantize_tensor, unpack_codes,
)

from golden_cases import GOLDEN_DIR, build, cases


# -- single groups -------------------------------------------------------------

def test_grid_values_quantize_exactly():
    codes, meta = quantize_group([0, 1, 2, 3], 2, QuantRng())
    assert codes.tolist() == [0, 1, 2, 3]
    assert (meta.range, meta.zero_point) == (3.0, 0.0)
    np.testing.assert_array_equal(dequantize_group(codes, meta, 2), [0, 1, 2, 3])


@pytest.mark.parametrize("bits", [1, 4, 8])
def test_constant_group(bits):
    codes, meta = quantize_group([5, 5, 5, 5], bits, QuantRng())
    assert codes.tolist() == [0, 0, 0, 0]
    assert meta.range == 0.0 and meta.zero_point == 5.0
    assert dequantize_group([0], GroupMeta(0.0, 5.0), bits).tolist() == [5.0]


def test_half_rounds_to_half_on_average():
    vals = np.full(100_000, 0.5, dtype=np.float32)
    codes, _ = quantize_group(vals, 1, QuantRng(seed=3), value_range=1.0, zero_point=0.0)
    assert abs(codes.mean() - 0.5) < 0.01


def test_group_errors():
    with pytest.raises(ValueError):
        quantize_group([], 2, QuantRng())
    with pytest.raises(ValueError):
        quantize_group([1.0, np.nan], 2, QuantRng())
    with pytest.raises(ValueError):
        quantize_group([1.0], 9, QuantRng())
    with pytest.raises(ValueError):
        dequantize_group([4], GroupMeta(3.0, 0.0), 2)


def test_same_key_same_draws():
    x = np.random.default_rng(0).standard_normal(300)
    a, _ = quantize_group(x, 3, QuantRng(1, 2, 3, 0))
    b, _ = quantize_group(x, 3, QuantRng(1, 2, 3, 0))
    c, _ = quantize_group(x, 3, QuantRng(1, 3, 3, 0))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- bfloat16 metadata -----------------------------------------------------------

def test_bf16_directed_rounding_brackets_value():
    x = np.random.default_rng(1).standard_normal(10_000).astype(np.float32) * 100
    lo = bf16_to_float(bf16_round_down(x))
    hi = bf16_to_float(bf16_round_up(x))
    assert np.all(lo <= x) and np.all(x <= hi)
    exact = np.array([0.0, 1.0, -2.0, 3.0], dtype=np.float32)
    np.testing.assert_array_equal(bf16_to_float(bf16_round_down(exact)), exact)
    np.testing.assert_array_equal(bf16_to_float(bf16_round_up(exact)), exact)


def test_grid_covers_every_value():
    # with stored (rounded) metadata every value must lie in [Z, Z + R]
    x = np.random.default_rng(2).normal(-3.3, 7.1, (20, 512)).astype(np.float32)
    p = quantize_tensor(x, 1, 256)
    z = p.zero_values().reshape(20, 2)
    r = p.range_values().reshape(20, 2)
    xg = x.reshape(20, 2, 256)
    assert np.all(xg >= z[..., None])
    assert np.all(xg <= (z + r)[..., None])


# -- bitstream -----------------------------------------------------------------

def test_pack_examples():
    assert pack_codes([1, 2, 3], 2) == b"\x39"
    assert pack_codes([1], 1) == b"\x01"
    assert unpack_codes(b"\x39", 2, 3).tolist() == [1, 2, 3]


def test_pack_errors():
    with pytest.raises(ValueError):
        pack_codes([4], 2)
    with pytest.raises(ValueError):
        unpack_codes(b"\x39", 2, 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 255), max_size=300))
def test_pack_roundtrip(bits, raw):
    codes = np.array(raw, dtype=np.int64) & ((1 << bits) - 1)
    data = pack_codes(codes, bits)
    assert len(data) == (bits * len(raw) + 7) // 8
    np.testing.assert_array_equal(unpack_codes(data, bits, len(raw)), codes)


# -- tensors -----------------------------------------------------------------------

def test_tensor_exact_roundtrip_on_grid():
    p = quantize_tensor(np.array([[0, 1, 2, 3]], dtype=np.float32), [2], 4)
    np.testing.assert_array_equal(dequantize_tensor(p), [[0, 1, 2, 3]])


def test_per_sample_widths():
    x = np.random.default_rng(0).standard_normal((2, 4)).astype(np.float32)
    p = quantize_tensor(x, [1, 8], 4)
    assert p.bits.tolist() == [1, 8]
    assert p.payload_bits == 4 * 9
    assert p.metadata_bits == 2 * 32
    q = dequantize_tensor(p)
    # 1-bit sample lands on {Z, Z + R}
    z, r = p.zero_values()[0], p.range_values()[0]
    assert set(np.round(q[0], 5)) <= {np.float32(round(float(z), 5)), np.float32(round(float(z + r), 5))}
    assert np.abs(q[1] - x[1]).max() <= p.range_values()[1] / 255 + 1e-6


def test_shape_restored_and_ragged_groups():
    x = np.random.default_rng(3).standard_normal((3, 2, 5, 7)).astype(np.float32)
    p = quantize_tensor(x, 4, 16)
    assert p.groups_per_sample == 5 and p.ranges.size == 15
    assert dequantize_tensor(p).shape == x.shape
    assert p.payload.size == (3 * 70 * 4 + 7) // 8


def test_tensor_errors():
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((2, 4)), [0, 2], 4)
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((2, 4)), 2, 0)
    with pytest.raises(ValueError):
        quantize_tensor(np.full((1, 2), np.inf), 2, 4)


def test_measure_group_ranges_examples():
    r, n = measure_group_ranges(np.array([[0, 1, 2, 3]], dtype=np.float32), 4)
    assert r.tolist() == [[3.0]] and n.tolist() == [9.0]
    r, n = measure_group_ranges(np.array([[0, 2, 1, 5]], dtype=np.float32), 2)
    assert r.tolist() == [[2.0, 4.0]] and n.tolist() == [20.0]
    r, _ = measure_group_ranges(np.ones((3, 10)), 4)
    assert np.all(r == 0)


def analytic_se(x, p, trials):
    """Standard error of the mean of ``trials`` dequantized draws, per element."""
    n, dim = p.num_samples, p.dim
    g = np.arange(dim) // p.group_size
    r = p.range_values().reshape(n, -1)[:, g]
    z = p.zero_values().reshape(n, -1)[:, g]
    bins = ((1 << p.bits.astype(int)) - 1)[:, None]
    u = bins * (x.reshape(n, dim) - z) / np.where(r > 0, r, 1)
    frac = u - np.floor(u)
    return (r / bins) * np.sqrt(frac * (1 - frac) / trials)


def test_unbiased_roundtrip():
    x = np.random.default_rng(4).standard_normal((2, 64)).astype(np.float32)
    trials = 4000
    draws = np.stack([dequantize_tensor(quantize_tensor(x, [2, 3], 32, QuantRng(0, s)))
                      for s in range(trials)]).astype(np.float64)
    se = analytic_se(x, quantize_tensor(x, [2, 3], 32), trials)
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 4 * se + 1e-6)


def test_variance_law_uniform_data():
    x = np.random.default_rng(5).uniform(0, 1, (8, 256)).astype(np.float32)
    var = {}
    for b in (2, 3):
        err = np.stack([dequantize_tensor(quantize_tensor(x, b, 256, QuantRng(1, s))) - x for s in range(400)])
        var[b] = float(err.var(axis=0).mean())
        pred = float(expected_variance(quantize_tensor(x, b, 256)).mean())
        assert abs(var[b] / pred - 1) < 0.1
    assert abs(var[2] / var[3] - (7 / 3) ** 2) / (7 / 3) ** 2 < 0.1
    assert abs(var[2] - 1 / 54) / (1 / 54) < 0.1


# -- serialization --------------------------------------------------------------------

def test_serialize_layout():
    p = quantize_tensor(np.array([[0, 1, 2, 3]], dtype=np.float32), [2], 4)
    data = p.serialize()
    assert data == b"ACTN\x01" + bytes([4, 0, 0, 0, 1, 0, 0, 0, 4, 0, 0, 0, 2]) + b"\x40\x40\x00\x00\xe4"


@pytest.mark.parametrize("case", list(cases()), ids=lambda c: c[0])
def test_golden_files(case):
    name, x, bits, g = case
    expected = (GOLDEN_DIR / f"{name}.bin").read_bytes()
    assert build(name, x, bits, g).serialize() == expected
    back = PackedActivation.deserialize(expected, np.shape(x))
    assert back.serialize() == expected


def test_deserialize_rejects_garbage():
    data = quantize_tensor(np.ones((2, 8)), 3, 4).serialize()
    with pytest.raises(ValueError):
        PackedActivation.deserialize(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        PackedActivation.deserialize(data[:-1])
    with pytest.raises(ValueError):
        PackedActivation.deserialize(data[:4] + b"\x02" + data[5:])
    with pytest.raises(ValueError):
        PackedActivation.deserialize(data, shape=(3, 8))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 40), st.integers(1, 64), st.data())
def test_serialize_roundtrip_property(n, dim, g, data):
    bits = np.array(data.draw(st.lists(st.integers(1, 8), min_size=n, max_size=n)))
    seed = data.draw(st.integers(0, 2 ** 32 - 1))
    x = np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32)
    p = quantize_tensor(x, bits, g, QuantRng(seed))
    blob = p.serialize()
    q = PackedActivation.deserialize(blob)
    assert q.serialize() == blob
    np.testing.assert_array_equal(dequantize_tensor(q), dequantize_tensor(p))
