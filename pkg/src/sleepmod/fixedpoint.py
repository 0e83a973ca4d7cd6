"""Signed integer datapath primitives.

All requantization uses round-to-nearest with ties away from zero. Products
are formed in int64 (or Python ints for scalars) so ``acc * multiplier``
never overflows for a 32-bit accumulator and a 15-bit multiplier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INT8_MIN, INT8_MAX = -128, 127
INT16_MIN, INT16_MAX = -32768, 32767
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1

MULTIPLIER_BITS = 15
MAX_SCALE_REL_ERROR = 2.0 ** -14


def saturate(x, lo: int, hi: int):
    if np.isscalar(x):
        return int(min(max(int(x), lo), hi))
    return np.clip(np.asarray(x, dtype=np.int64), lo, hi)


def saturate_to_i8(x):
    """Clamp a wide integer (or integer array) to [-128, 127]."""
    return saturate(x, INT8_MIN, INT8_MAX)


def saturate_to_i16(x):
    return saturate(x, INT16_MIN, INT16_MAX)


def round_shift(x, shift: int):
    """Divide by 2**shift, rounding to nearest with ties away from zero."""
    if shift < 0:
        raise ValueError("shift must be non-negative")
    if np.isscalar(x):
        x = int(x)
        if shift == 0:
            return x
        half = 1 << (shift - 1)
        mag = (abs(x) + half) >> shift
        return mag if x >= 0 else -mag
    x = np.asarray(x, dtype=np.int64)
    if shift == 0:
        return x.copy()
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(x) + half) >> np.int64(shift)
    return np.where(x >= 0, mag, -mag)


def fixed_mul(a, b, shift: int):
    """Shared multiply primitive: round((a*b) / 2**shift)."""
    if np.isscalar(a) and np.isscalar(b):
        return round_shift(int(a) * int(b), shift)
    prod = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    return round_shift(prod, shift)


@dataclass(frozen=True)
class Requantizer:
    """Rescale recipe ``multiplier / 2**right_shift``."""

    multiplier: int
    right_shift: int

    def __post_init__(self):
        if not 1 <= self.multiplier < (1 << MULTIPLIER_BITS):
            raise ValueError(f"multiplier {self.multiplier} outside [1, 2^15-1]")
        if not 0 <= self.right_shift <= 31:
            raise ValueError(f"right_shift {self.right_shift} outside [0, 31]")

    @property
    def scale(self) -> float:
        return self.multiplier / float(1 << self.right_shift)


def requantize(acc, rq: Requantizer, lo: int = INT8_MIN, hi: int = INT8_MAX):
    """Multiply, shift with rounding, saturate. Defaults to an int8 result."""
    if np.isscalar(acc):
        return saturate(round_shift(int(acc) * rq.multiplier, rq.right_shift), lo, hi)
    prod = np.asarray(acc, dtype=np.int64) * np.int64(rq.multiplier)
    return saturate(round_shift(prod, rq.right_shift), lo, hi)


def derive_requantizer(real_scale: float) -> Requantizer:
    """Best ``multiplier / 2**shift`` approximation of ``real_scale``.

    The multiplier is normalised into [2^14, 2^15) whenever the shift range
    allows it. Raises ``ValueError`` if the scale cannot be held within a
    relative error of 2^-14.
    """
    if not math.isfinite(real_scale) or not (2.0 ** -31 < real_scale < 2.0 ** 15):
        raise ValueError(f"scale {real_scale!r} outside representable range (2^-31, 2^15)")
    # frexp: real_scale = m * 2**e with m in [0.5, 1)
    _, e = math.frexp(real_scale)
    shift = MULTIPLIER_BITS - e
    shift = min(max(shift, 0), 31)
    multiplier = round(real_scale * (1 << shift))
    if multiplier >= (1 << MULTIPLIER_BITS):
        if shift > 0:
            shift -= 1
            multiplier = round(real_scale * (1 << shift))
        multiplier = min(multiplier, (1 << MULTIPLIER_BITS) - 1)
    if multiplier < 1:
        raise ValueError(f"scale {real_scale!r} too small for a 15-bit multiplier")
    rq = Requantizer(int(multiplier), int(shift))
    rel = abs(rq.scale - real_scale) / real_scale
    if rel > MAX_SCALE_REL_ERROR:
        raise ValueError(f"scale {real_scale!r} not representable within 2^-14 (rel err {rel:.3g})")
    return rq


def check_accumulator_headroom(fan_in: int, name: str = "layer") -> None:
    """Reject layers whose worst-case int8 dot product could overflow int32."""
    worst = fan_in * 128 * 128
    if worst > INT32_MAX:
        raise ValueError(f"{name}: fan-in {fan_in} can overflow a 32-bit accumulator")
