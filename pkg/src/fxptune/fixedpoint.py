"""Q-format fixed-point arithmetic.

Scalars are :class:`QValue` (a Python int plus a :class:`QFormat`), tensors are
:class:`QTensor` (an int64 array plus one format). Rounding is always
round-to-nearest with ties away from zero, followed by saturation.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# Storage widths plus the widths produced by widening multiplies of them.
STORAGE_BITS = (4, 8, 16, 32)
VALID_BITS = frozenset({4, 8, 12, 16, 20, 24, 32})

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_CALIBRATION_EPS = 2.0**-30
_FORMAT_RE = re.compile(r"^Q([su])(\d+)\.(-?\d+)$")


class InvalidNumericInput(ValueError):
    """Raised for NaN/Inf where a finite real number is required."""


class AccumulatorOverflow(OverflowError):
    """The wide accumulator would leave the int64 range."""


@dataclass(frozen=True)
class QFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.total_bits not in VALID_BITS:
            raise ValueError(f"unsupported bit-width {self.total_bits}")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def raw_max(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    @property
    def lsb(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def min_value(self) -> float:
        return math.ldexp(self.raw_min, -self.frac_bits)

    @property
    def max_value(self) -> float:
        return math.ldexp(self.raw_max, -self.frac_bits)

    def __str__(self) -> str:
        return f"Q{'s' if self.signed else 'u'}{self.total_bits}.{self.frac_bits}"

    @classmethod
    def parse(cls, text: str) -> QFormat:
        m = _FORMAT_RE.match(text.strip())
        if m is None:
            raise ValueError(f"not a Q-format string: {text!r}")
        return cls(int(m.group(2)), int(m.group(3)), m.group(1) == "s")


def format_label(fmt: QFormat | None) -> str:
    """Report label for a format; ``None`` means unquantized."""
    return "float" if fmt is None else str(fmt)


def parse_format_label(text: str) -> QFormat | None:
    return None if text == "float" else QFormat.parse(text)


@dataclass(frozen=True)
class QValue:
    raw: int
    fmt: QFormat

    def __post_init__(self):
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise ValueError(f"raw {self.raw} outside {self.fmt}")

    @property
    def value(self) -> float:
        return dequantize(self)

    def exact(self) -> Fraction:
        return Fraction(self.raw) * Fraction(2) ** -self.fmt.frac_bits


@dataclass(frozen=True, eq=False)
class QTensor:
    raw: np.ndarray
    fmt: QFormat

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.int64)
        if raw.size and (raw.min() < self.fmt.raw_min or raw.max() > self.fmt.raw_max):
            raise ValueError(f"raw values outside {self.fmt}")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    @property
    def shape(self):
        return self.raw.shape

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.raw.astype(np.float64), -self.fmt.frac_bits)


@dataclass(frozen=True)
class Accumulator:
    raw: int
    frac_bits: int

    def __post_init__(self):
        if not INT64_MIN <= self.raw <= INT64_MAX:
            raise AccumulatorOverflow(f"accumulator value {self.raw} exceeds 64 bits")

    @property
    def value(self) -> float:
        return math.ldexp(self.raw, -self.frac_bits)

    @classmethod
    def zero(cls, frac_bits: int) -> Accumulator:
        return cls(0, frac_bits)


def _round_half_away(y):
    """Round-half-away-from-zero without the ``|y| + 0.5`` float trap."""
    mag = np.abs(y)
    whole = np.floor(mag)
    whole = whole + (mag - whole >= 0.5)
    return np.copysign(whole, y)


def _check_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidNumericInput("non-finite value cannot be quantized")


def quantize(x: float, fmt: QFormat) -> QValue:
    _check_finite(x)
    scaled = math.ldexp(float(x), fmt.frac_bits)
    raw = int(_round_half_away(scaled)) if abs(scaled) < 2.0**62 else int(math.copysign(2**62, scaled))
    return QValue(min(max(raw, fmt.raw_min), fmt.raw_max), fmt)


def quantize_array(x, fmt: QFormat) -> QTensor:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    scaled = np.ldexp(x, fmt.frac_bits)
    raw = np.clip(_round_half_away(scaled), fmt.raw_min, fmt.raw_max)
    return QTensor(raw.astype(np.int64), fmt)


def fake_quantize(x, fmt: QFormat) -> np.ndarray:
    """Quantize and return the real values (float64) in one go."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    scaled = np.clip(_round_half_away(np.ldexp(x, fmt.frac_bits)), fmt.raw_min, fmt.raw_max)
    return np.ldexp(scaled, -fmt.frac_bits)


def dequantize(q: QValue) -> float:
    return math.ldexp(q.raw, -q.fmt.frac_bits)


def product_format(a: QFormat, b: QFormat) -> QFormat:
    if a.total_bits > 16 or b.total_bits > 16:
        raise ValueError("widening multiply supports operands of at most 16 bits")
    return QFormat(a.total_bits + b.total_bits, a.frac_bits + b.frac_bits, a.signed or b.signed)


def qmul(a: QValue, b: QValue) -> QValue:
    return QValue(a.raw * b.raw, product_format(a.fmt, b.fmt))


def acc_add(acc: Accumulator, p: QValue) -> Accumulator:
    if p.fmt.frac_bits != acc.frac_bits:
        raise ValueError(
            f"fractional length mismatch: accumulator {acc.frac_bits}, product {p.fmt.frac_bits}"
        )
    return Accumulator(acc.raw + p.raw, acc.frac_bits)


def _shift_round(raw: int, shift: int) -> int:
    if shift <= 0:
        return raw << -shift
    mag = abs(raw)
    q = mag >> shift
    if (mag - (q << shift)) << 1 >= 1 << shift:
        q += 1
    return -q if raw < 0 else q


def requantize(acc: Accumulator, target: QFormat) -> QValue:
    raw = _shift_round(acc.raw, acc.frac_bits - target.frac_bits)
    return QValue(min(max(raw, target.raw_min), target.raw_max), target)


def requantize_array(raw: np.ndarray, frac_bits: int, target: QFormat) -> QTensor:
    """Vectorised :func:`requantize` over an int64 accumulator array."""
    raw = np.asarray(raw, dtype=np.int64)
    shift = frac_bits - target.frac_bits
    if shift <= 0:
        if shift < -62:
            raise AccumulatorOverflow("left shift too large")
        limit = INT64_MAX >> -shift
        out = np.where(np.abs(raw) > limit, np.sign(raw) * INT64_MAX, raw << -shift)
    elif shift >= 63:
        out = np.zeros_like(raw)
    else:
        mag = np.abs(raw)
        q = mag >> shift
        rem = mag - (q << shift)
        q = q + (rem >= (np.int64(1) << (shift - 1)))
        out = np.where(raw < 0, -q, q)
    return QTensor(np.clip(out, target.raw_min, target.raw_max), target)


def choose_format(samples, total_bits: int, signed: bool = True) -> QFormat:
    """Pick the fractional length covering ``max|samples|`` at ``total_bits``.

    Integer bits never go negative, so small-magnitude tensors get
    ``total_bits - 1`` fractional bits (signed). If rounding ``log2`` leaves
    the maximum just above the top code, one more integer bit is granted.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot choose a format from an empty sample collection")
    _check_finite(arr)
    max_abs = float(np.max(np.abs(arr)))
    value_bits = total_bits - 1 if signed else total_bits
    if max_abs == 0.0:
        return QFormat(total_bits, value_bits, signed)
    int_bits = max(0, math.ceil(math.log2(max_abs + _CALIBRATION_EPS)))
    fmt = QFormat(total_bits, value_bits - int_bits, signed)
    if max_abs > fmt.max_value:
        fmt = QFormat(total_bits, fmt.frac_bits - 1, signed)
    return fmt
