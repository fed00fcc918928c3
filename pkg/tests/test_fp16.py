import numpy as np
import pytest
from hypothesis import given, strategies as st

from kster.fp16 import CANONICAL_NAN, REL_ERROR_BOUND, fp16_decode, fp16_encode, quantize

F16_MAX = 65504.0
F16_MIN_NORMAL = 2.0 ** -14
F16_MIN_SUB = 2.0 ** -24


def reference_bits(x):
    # numpy's float32 -> float16 cast is IEEE round-to-nearest-even
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).view(np.uint16)


@pytest.mark.parametrize("x, bits", [
    (1.0, 0x3C00), (0.0, 0x0000), (-0.0, 0x8000), (-2.0, 0xC000),
    (F16_MAX, 0x7BFF), (np.inf, 0x7C00), (-np.inf, 0xFC00),
    (F16_MIN_NORMAL, 0x0400), (F16_MIN_SUB, 0x0001),
])
def test_known_patterns(x, bits):
    assert int(fp16_encode(np.float32(x))) == bits
    assert fp16_decode(np.uint16(bits)) == np.float32(x)


def test_rounding_edges():
    # halfway below the smallest subnormal rounds to even (zero)
    assert int(fp16_encode(np.float32(2.0 ** -25))) == 0x0000
    assert int(fp16_encode(np.float32(3 * 2.0 ** -25))) == 0x0002
    # 65520 is the midpoint between max finite and the next step: overflows
    assert int(fp16_encode(np.float32(65520.0))) == 0x7C00
    assert int(fp16_encode(np.float32(65519.0))) == 0x7BFF
    # 1 + 2^-11 is a tie between 1 and 1 + 2^-10: even mantissa wins
    assert int(fp16_encode(np.float32(1 + 2.0 ** -11))) == 0x3C00
    assert int(fp16_encode(np.float32(1 + 3 * 2.0 ** -11))) == 0x3C02


def test_nan_is_canonical():
    for x in (np.nan, -np.nan, np.float32("nan")):
        assert int(fp16_encode(np.float32(x))) == CANONICAL_NAN
    assert np.isnan(fp16_decode(np.uint16(CANONICAL_NAN)))


def test_point_one_within_bound():
    back = float(quantize(np.float32(0.1)))
    assert abs(back - 0.1) / 0.1 <= REL_ERROR_BOUND


def test_exhaustive_roundtrip():
    bits = np.arange(1 << 16, dtype=np.uint16)
    back = fp16_encode(fp16_decode(bits))
    is_nan = ((bits & 0x7C00) == 0x7C00) & ((bits & 0x03FF) != 0)
    assert np.array_equal(back[~is_nan], bits[~is_nan])
    assert np.all(back[is_nan] == CANONICAL_NAN)


def test_decode_matches_reference_exhaustively():
    bits = np.arange(1 << 16, dtype=np.uint16)
    ours = fp16_decode(bits)
    ref = bits.view(np.float16).astype(np.float32)
    same = (ours == ref) | (np.isnan(ours) & np.isnan(ref))
    assert same.all()


def test_encode_matches_reference_on_random_floats():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 1 << 32, size=200_000, dtype=np.uint64).astype(np.uint32)
    x = raw.view(np.float32)
    x = x[~np.isnan(x)]
    assert np.array_equal(fp16_encode(x), reference_bits(x))


@given(st.floats(min_value=F16_MIN_NORMAL, max_value=F16_MAX, width=32),
       st.booleans())
def test_relative_error_bound(x, negative):
    x = -x if negative else x
    back = float(quantize(np.float32(x)))
    assert abs(back - x) <= REL_ERROR_BOUND * abs(x)


@given(st.floats(width=32, allow_nan=False))
def test_encode_agrees_with_reference(x):
    assert int(fp16_encode(np.float32(x))) == int(reference_bits(x))


def test_shapes_preserved():
    x = np.zeros((3, 4), dtype=np.float32)
    assert fp16_encode(x).shape == (3, 4)
    assert fp16_encode(x).dtype == np.uint16
    assert fp16_decode(fp16_encode(x)).dtype == np.float32
