"""Domain Specific Floating Point (DSFP) formats.

Two narrow float formats are used on the device:

    DSFP9   activations    1 sign | 4 exponent | 4 fraction   default bias 7
    DSFP15  coefficients   1 sign | 5 exponent | 9 fraction   default bias 15

Value of a code with sign ``s``, exponent field ``e`` and fraction ``f``::

    e > 0:  (-1)^s * (1 + f / 2^F) * 2^(e - bias)
    e = 0:  (-1)^s * (f / 2^F)     * 2^(1 - bias)

There are no NaN/Inf encodings; the top exponent is an ordinary binade.
The exponent bias is chosen per tensor, which is what makes the formats
"domain specific".

Codes are held in ``uint16`` containers (upper bits zero) and serialize as
little-endian 16-bit words.

Weighted sums are accumulated in :class:`WideAccumulator`, a two-limb
fixed-point integer that adds DSFP9 x DSFP15 products with no rounding at
all.  Rounding happens exactly once, when the accumulator is converted back
to a code.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

ArrayLike = Union[int, float, np.ndarray]

# Legal range for per-tensor exponent biases.  The wide accumulator is proven
# overflow-free for 2^20 max-magnitude products only inside this range.
EXP_BIAS_MIN = -16
EXP_BIAS_MAX = 48

LIMB_BITS = 32
_LIMB_MASK = (1 << LIMB_BITS) - 1


class DsfpDomainError(ValueError):
    """Raised for inputs outside the domain of a DSFP operation."""


@dataclass(frozen=True)
class DsfpFormat:
    name: str
    total_bits: int
    exp_bits: int
    frac_bits: int
    default_exp_bias: int
    sign_bits: int = 1

    def __post_init__(self):
        if self.sign_bits != 1:
            raise ValueError("DSFP formats carry exactly one sign bit")
        if self.sign_bits + self.exp_bits + self.frac_bits != self.total_bits:
            raise ValueError(f"{self.name}: bit fields do not add up to {self.total_bits}")

    @property
    def n_codes(self) -> int:
        return 1 << self.total_bits

    @property
    def max_exp_field(self) -> int:
        return (1 << self.exp_bits) - 1

    @property
    def sign_mask(self) -> int:
        return 1 << (self.exp_bits + self.frac_bits)

    @property
    def magnitude_mask(self) -> int:
        return self.sign_mask - 1

    def max_finite(self, exp_bias: int) -> float:
        return float(np.ldexp(2.0 - 2.0 ** -self.frac_bits, self.max_exp_field - exp_bias))

    def min_subnormal(self, exp_bias: int) -> float:
        return float(np.ldexp(1.0, 1 - exp_bias - self.frac_bits))

    def max_code(self, negative: bool = False) -> int:
        return self.magnitude_mask | (self.sign_mask if negative else 0)


DSFP9 = DsfpFormat("DSFP9", total_bits=9, exp_bits=4, frac_bits=4, default_exp_bias=7)
DSFP15 = DsfpFormat("DSFP15", total_bits=15, exp_bits=5, frac_bits=9, default_exp_bias=15)


@dataclass(frozen=True)
class DsfpCode:
    """A single code word tagged with its format."""

    bits: int
    format: DsfpFormat

    def __post_init__(self):
        if not 0 <= self.bits < self.format.n_codes:
            raise DsfpDomainError(f"{self.bits:#x} is not a valid {self.format.name} code")

    @property
    def sign(self) -> int:
        return (self.bits >> (self.format.total_bits - 1)) & 1

    @property
    def exponent(self) -> int:
        return (self.bits >> self.format.frac_bits) & self.format.max_exp_field

    @property
    def fraction(self) -> int:
        return self.bits & ((1 << self.format.frac_bits) - 1)

    @classmethod
    def from_fields(cls, fmt: DsfpFormat, sign: int, exponent: int, fraction: int) -> "DsfpCode":
        if not (0 <= exponent <= fmt.max_exp_field and 0 <= fraction < (1 << fmt.frac_bits)):
            raise DsfpDomainError("field out of range")
        bits = (sign << (fmt.total_bits - 1)) | (exponent << fmt.frac_bits) | fraction
        return cls(bits, fmt)

    def decode(self, exp_bias: int | None = None) -> float:
        bias = self.format.default_exp_bias if exp_bias is None else exp_bias
        return decode(self.bits, self.format, bias)


def _check_codes(codes: np.ndarray, fmt: DsfpFormat) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.dtype.kind not in "iu":
        raise DsfpDomainError(f"{fmt.name} codes must be integers, got {codes.dtype}")
    if codes.size and (codes.min() < 0 or codes.max() >= fmt.n_codes):
        raise DsfpDomainError(f"code out of range for {fmt.name}")
    return codes.astype(np.int64, copy=False)


def split_codes(codes: ArrayLike, fmt: DsfpFormat):
    """Integer view of codes: ``value = sign * mag * 2^shift * 2^(1 - bias - F)``.

    Returns ``(sign, mag, shift)`` int64 arrays, with ``sign`` in {-1, +1},
    ``mag`` the significand with the hidden bit made explicit and
    ``shift = max(e, 1) - 1``.
    """
    c = _check_codes(codes, fmt)
    f = c & ((1 << fmt.frac_bits) - 1)
    e = (c >> fmt.frac_bits) & fmt.max_exp_field
    sign = np.where(c & fmt.sign_mask, -1, 1).astype(np.int64)
    mag = np.where(e > 0, f | (1 << fmt.frac_bits), f)
    shift = np.maximum(e, 1) - 1
    return sign, mag, shift


@lru_cache(maxsize=256)
def decode_table(fmt: DsfpFormat, exp_bias: int) -> np.ndarray:
    """Decoded value of every code of ``fmt`` at ``exp_bias`` (read-only)."""
    sign, mag, shift = split_codes(np.arange(fmt.n_codes), fmt)
    table = sign * np.ldexp(mag.astype(np.float64), shift + 1 - exp_bias - fmt.frac_bits)
    table.setflags(write=False)
    return table


def decode(code: ArrayLike, fmt: DsfpFormat, exp_bias: int):
    """Decode one code or an array of codes to float64."""
    codes = _check_codes(code, fmt)
    out = decode_table(fmt, int(exp_bias))[codes]
    return float(out) if np.ndim(out) == 0 else out


def quantum(value: ArrayLike, fmt: DsfpFormat, exp_bias: int):
    """Spacing between adjacent codes in the binade containing ``|value|``."""
    a = np.abs(np.asarray(value, dtype=np.float64))
    _, ex = np.frexp(a)
    k = ex - 1
    qe = np.where(k + exp_bias >= 1, k - fmt.frac_bits, 1 - exp_bias - fmt.frac_bits)
    q = np.ldexp(1.0, qe)
    return float(q) if np.ndim(q) == 0 else q


def _pack(neg, mag_code, fmt: DsfpFormat) -> np.ndarray:
    mag_code = np.minimum(mag_code, fmt.magnitude_mask)
    code = np.where(neg & (mag_code > 0), mag_code | fmt.sign_mask, mag_code)
    return code.astype(np.uint16)


def _assemble(m, e_field, fmt: DsfpFormat):
    """Magnitude code from a rounded significand and its exponent field.

    A carry out of the significand (``m == 2^(F+1)``) lands in the next
    binade automatically; subnormal significands are already the code.
    """
    normal = e_field >= 1
    # keep the shift operand small where the branch is unused
    e_safe = np.where(normal, np.minimum(e_field, 1 << 20), 0)
    return np.where(normal, (e_safe << fmt.frac_bits) + (m - (1 << fmt.frac_bits)), m)


def encode(value: ArrayLike, fmt: DsfpFormat, exp_bias: int):
    """Round reals to the nearest code (ties to even, saturating).

    Magnitudes beyond the largest finite code clamp to it with the input's
    sign; magnitudes below half the smallest subnormal become +0.
    """
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DsfpDomainError("cannot encode non-finite value")
    a = np.abs(v)
    _, ex = np.frexp(a)
    k = ex.astype(np.int64) - 1
    e_field = k + exp_bias
    qe = np.where(e_field >= 1, k - fmt.frac_bits, 1 - exp_bias - fmt.frac_bits)
    m = np.rint(np.ldexp(a, -qe)).astype(np.int64)
    code = _pack(v < 0, np.where(a == 0, 0, _assemble(m, e_field, fmt)), fmt)
    return int(code) if np.ndim(code) == 0 else code


def _bit_length(x: np.ndarray) -> np.ndarray:
    """Bit length of non-negative int64 values below 2^62."""
    _, e = np.frexp(x.astype(np.float64))
    e = e.astype(np.int64)
    # int -> float may round up to the next power of two
    over = (x >> np.maximum(e - 1, 0)) == 0
    return np.where((x > 0) & over, e - 1, e)


def round_fixed(hi: np.ndarray, lo: np.ndarray, unit_exp: int, fmt: DsfpFormat,
                exp_bias: int, relu: bool = False) -> np.ndarray:
    """Round the exact value ``(hi * 2^32 + lo) * 2^unit_exp`` to codes.

    ``lo`` must be normalized to ``[0, 2^32)`` and ``|hi| < 2^61``.  The
    result is the correctly rounded (nearest, ties to even, saturating) code;
    no intermediate float is involved.
    """
    hi = np.asarray(hi, dtype=np.int64)
    lo = np.asarray(lo, dtype=np.int64)
    neg = hi < 0
    if relu:
        hi = np.where(neg, 0, hi)
        lo = np.where(neg, 0, lo)
        neg = np.zeros_like(neg)
    # magnitude limbs
    borrow = neg & (lo > 0)
    mh = np.where(neg, np.where(borrow, -hi - 1, -hi), hi)
    ml = np.where(borrow, (1 << LIMB_BITS) - lo, lo)

    length = np.where(mh > 0, _bit_length(mh) + LIMB_BITS, _bit_length(ml))
    k = length - 1 + unit_exp
    e_field = k + exp_bias
    qe = np.where(e_field >= 1, k - fmt.frac_bits, 1 - exp_bias - fmt.frac_bits)
    r = qe - unit_exp  # low bits to drop

    # r <= 0: exact, the whole value sits in the low limb
    m_exact = ml << np.clip(-r, 0, 62)

    # 0 < r <= 32
    ra = np.clip(r, 1, LIMB_BITS)
    m_a = (mh << (LIMB_BITS - ra)) | (ml >> ra)
    rem_a = ml & ((np.int64(1) << ra) - 1)
    half_a = np.int64(1) << (ra - 1)
    gt_a = rem_a > half_a
    eq_a = rem_a == half_a

    # r > 32
    t = np.clip(r - LIMB_BITS, 1, 61)
    m_b = mh >> t
    rem_b = mh & ((np.int64(1) << t) - 1)
    half_b = np.int64(1) << (t - 1)
    gt_b = (rem_b > half_b) | ((rem_b == half_b) & (ml > 0))
    eq_b = (rem_b == half_b) & (ml == 0)
    beyond = r - LIMB_BITS > 61  # value below a quarter quantum
    m_b = np.where(beyond, 0, m_b)
    gt_b = gt_b & ~beyond
    eq_b = eq_b & ~beyond

    m = np.where(r <= 0, m_exact, np.where(r <= LIMB_BITS, m_a, m_b))
    gt = np.where(r <= 0, False, np.where(r <= LIMB_BITS, gt_a, gt_b))
    eq = np.where(r <= 0, False, np.where(r <= LIMB_BITS, eq_a, eq_b))
    m = m + (gt | (eq & ((m & 1) == 1)))

    mag_code = np.where(length == 0, 0, _assemble(m, e_field, fmt))
    return _pack(neg, mag_code, fmt)


def accumulator_unit_exp(bias_a: int, bias_w: int, fmt_a: DsfpFormat = DSFP9,
                         fmt_w: DsfpFormat = DSFP15) -> int:
    """Exponent of the fixed-point LSB that holds both products and a ``fmt_w`` bias."""
    for b in (bias_a, bias_w):
        if not EXP_BIAS_MIN <= b <= EXP_BIAS_MAX:
            raise DsfpDomainError(f"exponent bias {b} outside [{EXP_BIAS_MIN}, {EXP_BIAS_MAX}]")
    product_lsb = (1 - bias_a - fmt_a.frac_bits) + (1 - bias_w - fmt_w.frac_bits)
    bias_lsb = 1 - bias_w - fmt_w.frac_bits
    return min(product_lsb, bias_lsb)


class WideAccumulator:
    """Exact fixed-point accumulator for weighted sums.

    Holds ``(hi * 2^32 + lo) * 2^unit_exp`` per element in two int64 limbs.
    Products of a DSFP9 and a DSFP15 code are at most 2^15 in significand and
    shifted by at most 60 bits within the legal bias range, so the high limb
    stays below 2^63 for 2^20 accumulated max-magnitude products.
    """

    def __init__(self, shape=(), unit_exp: int = 0):
        self.unit_exp = int(unit_exp)
        self.hi = np.zeros(shape, dtype=np.int64)
        self.lo = np.zeros(shape, dtype=np.int64)

    @classmethod
    def for_biases(cls, bias_a: int, bias_w: int, shape=()) -> "WideAccumulator":
        return cls(shape, accumulator_unit_exp(bias_a, bias_w))

    @property
    def shape(self):
        return self.hi.shape

    def copy(self) -> "WideAccumulator":
        out = WideAccumulator(self.shape, self.unit_exp)
        out.hi[...] = self.hi
        out.lo[...] = self.lo
        return out

    def add_scaled(self, sign, mag, shift, axis=None) -> "WideAccumulator":
        """Add ``sign * mag * 2^shift`` units, optionally summed over ``axis`` first.

        ``mag`` must be non-negative and below 2^31, ``shift`` non-negative.
        """
        sign = np.asarray(sign, dtype=np.int64)
        mag = np.asarray(mag, dtype=np.int64)
        shift = np.asarray(shift, dtype=np.int64)
        big = shift >= LIMB_BITS
        full = mag << np.where(big, 0, shift)
        t_hi = np.where(big, mag << np.where(big, shift - LIMB_BITS, 0), full >> LIMB_BITS)
        t_lo = np.where(big, 0, full & _LIMB_MASK)
        t_hi = sign * t_hi
        t_lo = sign * t_lo
        if axis is not None:
            t_hi = t_hi.sum(axis=axis)
            t_lo = t_lo.sum(axis=axis)
        self.hi += t_hi
        self.lo += t_lo
        self._normalize()
        return self

    def add_products(self, a_codes, w_codes, bias_a: int, bias_w: int,
                     fmt_a: DsfpFormat = DSFP9, fmt_w: DsfpFormat = DSFP15,
                     axis=None) -> "WideAccumulator":
        """Accumulate ``decode(a) * decode(w)`` (broadcast), summed over ``axis``."""
        sa, ma, ea = split_codes(a_codes, fmt_a)
        sw, mw, ew = split_codes(w_codes, fmt_w)
        lsb = (1 - bias_a - fmt_a.frac_bits) + (1 - bias_w - fmt_w.frac_bits)
        extra = lsb - self.unit_exp
        if extra < 0:
            raise DsfpDomainError("accumulator unit is coarser than the product LSB")
        return self.add_scaled(sa * sw, ma * mw, ea + ew + extra, axis=axis)

    def add_code(self, codes, exp_bias: int, fmt: DsfpFormat = DSFP15) -> "WideAccumulator":
        """Accumulate decoded codes (used for the layer bias)."""
        s, m, e = split_codes(codes, fmt)
        extra = (1 - exp_bias - fmt.frac_bits) - self.unit_exp
        if extra < 0:
            raise DsfpDomainError("accumulator unit is coarser than the code LSB")
        return self.add_scaled(s, m, e + extra)

    def _normalize(self):
        carry = self.lo >> LIMB_BITS
        self.lo -= carry << LIMB_BITS
        self.hi += carry

    def exact(self):
        """Exact value(s) as Python ``int`` numerators over ``2^-unit_exp``."""
        if self.hi.ndim == 0:
            return (int(self.hi) << LIMB_BITS) + int(self.lo)
        return np.array([(int(h) << LIMB_BITS) + int(l)
                         for h, l in zip(self.hi.ravel(), self.lo.ravel())],
                        dtype=object).reshape(self.shape)

    def to_float(self):
        """Nearest float64 (for inspection; rounding uses :meth:`to_codes`)."""
        ex = self.exact()
        if self.hi.ndim == 0:
            return float(np.ldexp(float(ex), self.unit_exp))
        return np.ldexp(np.array([float(x) for x in ex.ravel()]), self.unit_exp).reshape(self.shape)

    def to_codes(self, fmt: DsfpFormat, exp_bias: int, relu: bool = False) -> np.ndarray:
        codes = round_fixed(self.hi, self.lo, self.unit_exp, fmt, exp_bias, relu=relu)
        return codes


def mac(acc: WideAccumulator, a: DsfpCode, w: DsfpCode, bias_a: int, bias_w: int) -> WideAccumulator:
    """``acc + decode(a) * decode(w)`` with no rounding; returns a new accumulator."""
    out = acc.copy()
    return out.add_products(a.bits, w.bits, bias_a, bias_w, a.format, w.format)


def codes_to_bytes(codes) -> bytes:
    return np.ascontiguousarray(codes, dtype="<u2").tobytes()


def codes_from_bytes(buf: bytes, fmt: DsfpFormat, shape=None) -> np.ndarray:
    if len(buf) % 2:
        raise DsfpDomainError("code stream length is not a multiple of 2 bytes")
    codes = np.frombuffer(buf, dtype="<u2").astype(np.uint16)
    if codes.size and codes.max() >= fmt.n_codes:
        raise DsfpDomainError(f"container has bits set above {fmt.name} width")
    return codes.reshape(shape) if shape is not None else codes
