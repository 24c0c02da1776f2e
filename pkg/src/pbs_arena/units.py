"""Integer Gwei arithmetic helpers.

Every fraction in the simulator is held as an exact :class:`fractions.Fraction`
so that ``floor(fraction * amount)`` is computed with integers only.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Union

Gwei = int
FractionLike = Union[Fraction, float, int, str]


def to_fraction(value: FractionLike) -> Fraction:
    """Exact fraction from a config value; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("boolean is not a fraction")
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def unit_fraction(value: FractionLike, name: str) -> Fraction:
    frac = to_fraction(value)
    if not 0 <= frac <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return frac


def mul_floor(amount: Gwei, frac: Fraction) -> Gwei:
    """floor(frac * amount) for non-negative integer ``amount``."""
    return amount * frac.numerator // frac.denominator


def fraction_out(frac: Fraction) -> Union[float, str]:
    """Serialized form of a config fraction that round-trips through to_fraction.

    A float when its repr is exact, otherwise the string "n/d".
    """
    as_float = float(frac)
    if Fraction(repr(as_float)) == frac:
        return as_float
    return f"{frac.numerator}/{frac.denominator}"
