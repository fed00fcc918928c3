"""IEEE 754 binary16 conversion done with integer bit manipulation.

Keys are quantized to half precision once, when they enter a datastore, and
decoded back to single precision for every distance computation.
"""
import numpy as np

CANONICAL_NAN = 0x7E00
REL_ERROR_BOUND = 2.0 ** -11


def fp16_encode(x):
    """Round single-precision values to binary16 bit patterns (nearest-even).

    Overflow saturates to infinity, NaN maps to ``CANONICAL_NAN``. Accepts a
    scalar or array; returns ``np.uint16`` of the same shape.
    """
    x = np.asarray(x, dtype=np.float32)
    scalar = x.ndim == 0
    bits = np.atleast_1d(x).view(np.uint32).astype(np.int64)

    sign = (bits >> 16) & 0x8000
    exp32 = (bits >> 23) & 0xFF
    mant32 = bits & 0x7FFFFF
    e = exp32 - 112  # rebias 127 -> 15

    # normal range: drop 13 mantissa bits
    half_mant = mant32 >> 13
    rem = mant32 & 0x1FFF
    round_up = (rem > 0x1000) | ((rem == 0x1000) & ((half_mant & 1) == 1))
    normal = (np.clip(e, 0, 31) << 10) + half_mant + round_up
    normal = np.where(normal >= 0x7C00, 0x7C00, normal)

    # subnormal range (and underflow to zero): shift in the implicit bit
    full = np.where(exp32 > 0, mant32 | 0x800000, mant32)
    shift = np.clip(14 - e, 14, 31)
    sub = full >> shift
    sub_rem = full & ((np.int64(1) << shift) - 1)
    halfway = np.int64(1) << (shift - 1)
    sub_up = (sub_rem > halfway) | ((sub_rem == halfway) & ((sub & 1) == 1))
    sub = sub + sub_up

    out = np.where(e >= 1, normal, sub)
    out = np.where(e >= 31, 0x7C00, out)
    out = out | sign
    is_nan = (exp32 == 0xFF) & (mant32 != 0)
    is_inf = (exp32 == 0xFF) & (mant32 == 0)
    out = np.where(is_inf, sign | 0x7C00, out)
    out = np.where(is_nan, CANONICAL_NAN, out)
    out = out.astype(np.uint16)
    return out[0] if scalar else out.reshape(x.shape)


def fp16_decode(bits):
    """Expand binary16 bit patterns to exact single-precision values."""
    bits = np.asarray(bits)
    scalar = bits.ndim == 0
    b = np.atleast_1d(bits).astype(np.int64)
    sign = np.where(b & 0x8000, -1.0, 1.0)
    exp = (b >> 10) & 0x1F
    mant = b & 0x3FF

    # every binary16 value is exact in float64, so plain arithmetic is safe
    value = np.where(
        exp == 0,
        mant * 2.0 ** -24,
        (1.0 + mant / 1024.0) * np.exp2(exp.astype(np.float64) - 15),
    )
    value = np.where(exp == 31, np.where(mant == 0, np.inf, np.nan), value)
    out = (sign * value).astype(np.float32)
    return out[0] if scalar else out.reshape(bits.shape)


def quantize(x):
    """Round values onto the binary16 grid, keeping single precision."""
    return fp16_decode(fp16_encode(x))
