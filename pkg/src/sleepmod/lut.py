"""38-entry tanh lookup table with linear interpolation.

Entries sample tanh on the half-range [0, 4.625] at a step of 1/8; negative
inputs use odd symmetry and inputs beyond the last breakpoint saturate to 1.
Sigmoid is derived as ``(1 + tanh(x / 2)) / 2``.
"""
from __future__ import annotations

import numpy as np

from .fixedpoint import fixed_mul

N_ENTRIES = 38
STEP_LOG2 = 3  # step = 2**-3
STEP = 2.0 ** -STEP_LOG2
X_MAX = (N_ENTRIES - 1) * STEP  # 4.625

TANH_TABLE = np.tanh(np.arange(N_ENTRIES) * STEP)


def tanh_lut(x):
    """Interpolated tanh for real input (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    pos = a / STEP
    idx = np.minimum(np.floor(pos).astype(np.int64), N_ENTRIES - 2)
    frac = pos - idx
    y = TANH_TABLE[idx] + (TANH_TABLE[idx + 1] - TANH_TABLE[idx]) * frac
    y = np.where(a > X_MAX, 1.0, y)
    y = np.copysign(y, x)
    return float(y) if y.ndim == 0 else y


def sigmoid_lut(x):
    x = np.asarray(x, dtype=np.float64)
    y = (1.0 + np.asarray(tanh_lut(x / 2.0))) / 2.0
    return float(y) if y.ndim == 0 else y


def table_fixed(frac_bits: int) -> np.ndarray:
    """Table entries rounded to the given Q format."""
    return np.floor(TANH_TABLE * (1 << frac_bits) + 0.5).astype(np.int64)


def tanh_lut_fixed(x_q, in_frac: int = 12, out_frac: int = 12):
    """Fixed-point tanh: ``x_q`` in Q.in_frac, result in Q.out_frac.

    The bracket index is a right shift; the interpolation uses the shared
    ``fixed_mul`` primitive.
    """
    if in_frac < STEP_LOG2:
        raise ValueError("input format needs at least 3 fractional bits")
    table = table_fixed(out_frac)
    one = 1 << out_frac
    x_q = np.asarray(x_q, dtype=np.int64)
    a = np.abs(x_q)
    sub = in_frac - STEP_LOG2
    idx = a >> sub
    frac = a & ((1 << sub) - 1)
    sat = idx >= N_ENTRIES - 1
    i0 = np.minimum(idx, N_ENTRIES - 2)
    # at exactly x == X_MAX use the last entry, beyond it saturate
    y = table[i0] + fixed_mul(table[i0 + 1] - table[i0], frac, sub)
    y = np.where(sat, np.where((idx == N_ENTRIES - 1) & (frac == 0), table[-1], one), y)
    y = np.where(x_q < 0, -y, y)
    return int(y) if y.ndim == 0 else y


def sigmoid_lut_fixed(x_q, frac_bits: int = 12):
    """Fixed-point sigmoid in Q.frac_bits; halving the input is free by
    reinterpreting it with one more fractional bit."""
    t = np.asarray(tanh_lut_fixed(x_q, in_frac=frac_bits + 1, out_frac=frac_bits))
    y = ((1 << frac_bits) + t + 1) >> 1
    return int(y) if y.ndim == 0 else y


def dump_table() -> str:
    return "\n".join(f"{v:.10f}" for v in TANH_TABLE) + "\n"
