"""
Signed fixed-point arithmetic.

Values are stored as integer mantissas (``raw``) together with a
:class:`QFormat` that fixes the number of integer and fraction bits of one
real component. A complex value uses the same format for its real and
imaginary part. Overflow always saturates; narrowing either truncates
(floor, the cheap hardware choice) or rounds to nearest-even.

The array helpers (:func:`quantize`, :func:`requantize`, :func:`saturate`,
:func:`shift_round`) accept Python ints, ``int64`` arrays and ``object``
arrays of Python ints alike, so the same code serves the vectorized
datapath model and exact wide-integer checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "Rounding",
    "QFormat",
    "FixedScalar",
    "FixedComplex",
    "FormatMismatchError",
    "quantize",
    "requantize",
    "saturate",
    "shift_round",
    "to_float",
    "fx_add",
    "fx_mul_complex",
    "lod",
    "arith_shift",
]


class FormatMismatchError(ValueError):
    """Raised when two operands of a fixed-point op carry different formats."""


class Rounding(str, enum.Enum):
    TRUNCATE = "truncate"
    NEAREST_EVEN = "nearest-even"


@dataclass(frozen=True)
class QFormat:
    """Signed fixed-point format of one real component.

    The sign bit is implicit, so the stored width is
    ``1 + integer_bits + fraction_bits``.
    """

    integer_bits: int
    fraction_bits: int

    def __post_init__(self):
        if self.integer_bits < 0 or self.fraction_bits < 0:
            raise ValueError(f"negative bit count in {self}")
        if self.width > 64:
            raise ValueError(f"{self} is {self.width} bits wide; at most 64 allowed")

    @property
    def width(self) -> int:
        return 1 + self.integer_bits + self.fraction_bits

    @property
    def raw_min(self) -> int:
        return -(1 << (self.integer_bits + self.fraction_bits))

    @property
    def raw_max(self) -> int:
        return (1 << (self.integer_bits + self.fraction_bits)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.fraction_bits

    @property
    def min_value(self) -> float:
        return -(2.0 ** self.integer_bits)

    @property
    def max_value(self) -> float:
        return 2.0 ** self.integer_bits - self.lsb

    def __str__(self):
        return f"Q{self.integer_bits}.{self.fraction_bits}"

    def to_dict(self) -> dict:
        return {"integer_bits": self.integer_bits, "fraction_bits": self.fraction_bits}

    @classmethod
    def from_dict(cls, d) -> "QFormat":
        if isinstance(d, str):
            i, f = d.lstrip("Qq").split(".")
            return cls(int(i), int(f))
        return cls(int(d["integer_bits"]), int(d["fraction_bits"]))


# ---------------------------------------------------------------------------
# array-level primitives
# ---------------------------------------------------------------------------


def saturate(raw, fmt: QFormat):
    """Clamp mantissas to the representable range of ``fmt``."""
    if isinstance(raw, np.ndarray):
        return np.minimum(np.maximum(raw, fmt.raw_min), fmt.raw_max)
    return min(max(int(raw), fmt.raw_min), fmt.raw_max)


def shift_round(raw, k: int, rounding: Rounding | str = Rounding.TRUNCATE):
    """Multiply mantissas by ``2**-k``, rounding when bits are dropped.

    ``k <= 0`` is an exact left shift. No saturation is applied.
    """
    rounding = Rounding(rounding)
    if k <= 0:
        return raw << (-k)
    q = raw >> k
    if rounding is Rounding.TRUNCATE:
        return q
    rem = raw - (q << k)
    half = 1 << (k - 1)
    if isinstance(raw, np.ndarray):
        up = (rem > half) | ((rem == half) & ((q & 1) == 1))
        return np.where(up, q + 1, q)
    if rem > half or (rem == half and q & 1):
        return q + 1
    return q


def requantize(raw, from_frac: int, fmt: QFormat, rounding: Rounding | str = Rounding.TRUNCATE):
    """Re-express mantissas scaled by ``2**-from_frac`` in ``fmt`` (round, then saturate)."""
    return saturate(shift_round(raw, from_frac - fmt.fraction_bits, rounding), fmt)


def quantize(value, fmt: QFormat, rounding: Rounding | str = Rounding.TRUNCATE, dtype=np.int64):
    """Quantize real values (float, Fraction, or float array) to mantissas in ``fmt``."""
    rounding = Rounding(rounding)
    if isinstance(value, Fraction):
        scaled = value * (1 << fmt.fraction_bits)
        q = scaled.numerator // scaled.denominator
        rem = scaled - q
        if rounding is Rounding.NEAREST_EVEN and (rem > Fraction(1, 2) or (rem == Fraction(1, 2) and q & 1)):
            q += 1
        return saturate(q, fmt)
    if np.ndim(value) == 0:
        return quantize(Fraction(float(value)), fmt, rounding)
    scaled = np.ldexp(np.asarray(value, dtype=np.float64), fmt.fraction_bits)
    # float64 scaling by a power of two is exact, so floor/rint are exact as well
    q = np.floor(scaled) if rounding is Rounding.TRUNCATE else np.rint(scaled)
    if dtype is object or fmt.width > 62:
        q = np.array([int(v) for v in q.ravel()], dtype=object).reshape(q.shape)
        q = saturate(q, fmt)
        return q if dtype is object else q.astype(np.int64)
    return np.clip(q, float(fmt.raw_min), float(fmt.raw_max)).astype(np.int64)


def to_float(raw, frac_bits: int):
    """Mantissas scaled by ``2**-frac_bits`` as float64."""
    if isinstance(raw, np.ndarray):
        if raw.dtype == object:
            raw = raw.astype(np.float64)
        return np.ldexp(raw.astype(np.float64), -frac_bits)
    return float(Fraction(int(raw), 1 << frac_bits))


# ---------------------------------------------------------------------------
# scalar value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedScalar:
    raw: int
    fmt: QFormat

    def __post_init__(self):
        object.__setattr__(self, "raw", saturate(int(self.raw), self.fmt))

    @classmethod
    def from_value(cls, value, fmt: QFormat, rounding=Rounding.TRUNCATE) -> "FixedScalar":
        if not isinstance(value, Fraction):
            value = Fraction(value)
        return cls(quantize(value, fmt, rounding), fmt)

    @property
    def exact(self) -> Fraction:
        return Fraction(self.raw, 1 << self.fmt.fraction_bits)

    def __float__(self):
        return float(self.exact)


@dataclass(frozen=True)
class FixedComplex:
    re: FixedScalar
    im: FixedScalar

    def __post_init__(self):
        if self.re.fmt != self.im.fmt:
            raise FormatMismatchError(f"re is {self.re.fmt}, im is {self.im.fmt}")

    @property
    def fmt(self) -> QFormat:
        return self.re.fmt

    @classmethod
    def from_value(cls, value: complex, fmt: QFormat, rounding=Rounding.TRUNCATE) -> "FixedComplex":
        value = complex(value)
        return cls(
            FixedScalar.from_value(value.real, fmt, rounding),
            FixedScalar.from_value(value.imag, fmt, rounding),
        )

    def __complex__(self):
        return complex(float(self.re), float(self.im))


def fx_add(a: FixedScalar, b: FixedScalar) -> FixedScalar:
    if a.fmt != b.fmt:
        raise FormatMismatchError(f"cannot add {a.fmt} and {b.fmt}")
    return FixedScalar(a.raw + b.raw, a.fmt)


def fx_mul_complex(
    a: FixedComplex,
    b: FixedComplex,
    out_fmt: QFormat,
    rounding: Rounding | str = Rounding.TRUNCATE,
) -> FixedComplex:
    """Full-precision complex product, narrowed once into ``out_fmt``."""
    frac = a.fmt.fraction_bits + b.fmt.fraction_bits
    re = a.re.raw * b.re.raw - a.im.raw * b.im.raw
    im = a.re.raw * b.im.raw + a.im.raw * b.re.raw
    return FixedComplex(
        FixedScalar(requantize(re, frac, out_fmt, rounding), out_fmt),
        FixedScalar(requantize(im, frac, out_fmt, rounding), out_fmt),
    )


def lod(x: int) -> int | None:
    """Leading-one detector: index of the most significant set bit, ``None`` for 0."""
    x = int(x)
    if x < 0:
        raise ValueError("lod expects a non-negative magnitude")
    return x.bit_length() - 1 if x else None


def arith_shift(x: FixedScalar, k: int, rounding: Rounding | str = Rounding.TRUNCATE) -> FixedScalar:
    """``x * 2**k`` in the same format; right shifts round, left shifts saturate."""
    return FixedScalar(saturate(shift_round(x.raw, -k, rounding), x.fmt), x.fmt)
