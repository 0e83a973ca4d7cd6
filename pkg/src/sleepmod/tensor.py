"""1-D tensors and neural primitives, in float and int8 flavours.

Tensors are channel-major ``(channels, length)`` arrays. Integer convolution
accumulates int8 x int8 products; the dot products are evaluated with a
float64 BLAS matmul on integer-valued operands, which is exact because every
partial sum stays far below 2**53 (checked via ``check_accumulator_headroom``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fixedpoint import (
    INT8_MAX,
    INT8_MIN,
    Requantizer,
    check_accumulator_headroom,
    requantize,
)

KERNEL_BLOCK = 4


@dataclass(frozen=True)
class QuantTensor:
    """int8 codes with a per-tensor scale: ``value ~= data * scale``."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        data = np.asarray(self.data)
        if data.size and (data.min() < INT8_MIN or data.max() > INT8_MAX):
            raise ValueError("codes outside int8 range")
        object.__setattr__(self, "data", data.astype(np.int8))

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


def quantize(x, scale: float) -> QuantTensor:
    """Symmetric int8 quantization, round half away from zero, saturating
    to [-127, 127] so that ``quantize(-x) == -quantize(x)``."""
    x = np.asarray(x, dtype=np.float64)
    codes = np.sign(x) * np.floor(np.abs(x) / scale + 0.5)
    return QuantTensor(np.clip(codes, -INT8_MAX, INT8_MAX).astype(np.int8), scale)


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: str = "same"
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")

    def output_length(self, length: int) -> int:
        if self.padding == "same":
            return math.ceil(length / self.stride)
        return (length - self.kernel_size) // self.stride + 1

    def pad_amounts(self, length: int) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        out = self.output_length(length)
        total = max((out - 1) * self.stride + self.kernel_size - length, 0)
        return total // 2, total - total // 2

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size

    @property
    def n_params(self) -> int:
        return self.fan_in * self.out_channels + (self.out_channels if self.has_bias else 0)


def _check_input(x: np.ndarray, spec: ConvLayerSpec) -> None:
    if x.ndim != 2 or x.shape[0] != spec.in_channels:
        raise ValueError(
            f"expected input with {spec.in_channels} channels, got shape {x.shape}")
    if spec.output_length(x.shape[1]) < 1:
        raise ValueError(f"input length {x.shape[1]} too short for kernel {spec.kernel_size}")


def _patches(x: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    """im2col: (T_out, C_in * k) view of the padded input."""
    left, right = spec.pad_amounts(x.shape[1])
    if left or right:
        x = np.pad(x, ((0, 0), (left, right)))
    win = sliding_window_view(x, spec.kernel_size, axis=1)[:, ::spec.stride, :]
    t_out = spec.output_length(x.shape[1] - left - right)
    win = win[:, :t_out, :]
    return win.transpose(1, 0, 2).reshape(t_out, -1)


def conv1d_float(x, weights, spec: ConvLayerSpec, bias=None) -> np.ndarray:
    """Cross-correlation of ``x`` (C_in, L) with ``weights`` (C_out, C_in, k)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    _check_input(x, spec)
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_size):
        raise ValueError(f"weight shape {w.shape} does not match {spec}")
    out = w.reshape(spec.out_channels, -1) @ _patches(x, spec).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[:, None]
    return out


def conv1d_quant(
    x: QuantTensor,
    weights: QuantTensor,
    spec: ConvLayerSpec,
    rq: Requantizer,
    out_scale: float,
    block: int = KERNEL_BLOCK,
    trace: Optional[Callable[[dict], None]] = None,
) -> QuantTensor:
    """Integer convolution processed ``block`` output kernels at a time.

    Each output element is an exact 32-bit accumulation of int8 products,
    requantized to int8 with ``rq`` (which should approximate
    ``x.scale * weights.scale / out_scale``).
    """
    _check_input(x.data, spec)
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kernel_size):
        raise ValueError(f"weight shape {weights.shape} does not match {spec}")
    check_accumulator_headroom(spec.fan_in)
    cols = _patches(x.data.astype(np.float64), spec).T
    wmat = weights.data.reshape(spec.out_channels, -1).astype(np.float64)
    out = np.empty((spec.out_channels, cols.shape[1]), dtype=np.int8)
    for start in range(0, spec.out_channels, block):
        stop = min(start + block, spec.out_channels)
        acc = np.rint(wmat[start:stop] @ cols).astype(np.int64)
        out[start:stop] = requantize(acc, rq)
        if trace is not None:
            trace({"op": "conv_block", "kernels": (start, stop), "frames": cols.shape[1]})
    return QuantTensor(out, out_scale)


def conv1d_acc(x_codes: np.ndarray, w_codes: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    """Raw int64 accumulators of an integer convolution (no requantization)."""
    _check_input(x_codes, spec)
    check_accumulator_headroom(spec.fan_in)
    cols = _patches(np.asarray(x_codes, dtype=np.float64), spec).T
    wmat = np.asarray(w_codes, dtype=np.float64).reshape(spec.out_channels, -1)
    return np.rint(wmat @ cols).astype(np.int64)


def _pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if window > x.shape[-1]:
        raise ValueError(f"pool window {window} exceeds input length {x.shape[-1]}")
    return sliding_window_view(x, window, axis=-1)[..., ::stride, :]


def maxpool1d(x, window: int, stride: int):
    """Per-channel sliding max; accepts float arrays or ``QuantTensor``."""
    if isinstance(x, QuantTensor):
        return QuantTensor(_pool_windows(x.data, window, stride).max(axis=-1), x.scale)
    return _pool_windows(np.asarray(x, dtype=np.float64), window, stride).max(axis=-1)


def pool_output_length(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def relu(x):
    if isinstance(x, QuantTensor):
        return QuantTensor(np.maximum(x.data, 0), x.scale)
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def fold_batchnorm(weights, gamma, beta, mean, var, eps: float = 1e-5):
    """Fold an inference-time batch norm into the preceding conv.

    Returns ``(weights', bias')`` with the per-output-channel factor
    ``gamma / sqrt(var + eps)`` applied.
    """
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("batch-norm variance must be non-negative")
    factor = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    w = np.asarray(weights, dtype=np.float64)
    w_folded = w * factor.reshape((-1,) + (1,) * (w.ndim - 1))
    bias = np.asarray(beta, dtype=np.float64) - np.asarray(mean, dtype=np.float64) * factor
    return w_folded, bias


def adaptive_pool_bounds(length: int, out_len: int) -> list[tuple[int, int]]:
    """Bin boundaries of adaptive average pooling (floor start, ceil end)."""
    if out_len < 1 or length < out_len:
        raise ValueError(f"cannot adaptively pool {length} values to {out_len}")
    return [((i * length) // out_len, -((-(i + 1) * length) // out_len)) for i in range(out_len)]


def adaptive_avg_pool_float(x: np.ndarray, out_len: int) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).ravel()
    return np.array([flat[a:b].mean() for a, b in adaptive_pool_bounds(flat.size, out_len)])


def adaptive_avg_pool_codes(codes: np.ndarray, out_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer sums and bin widths; caller rescales ``sum / width``."""
    flat = np.asarray(codes, dtype=np.int64).ravel()
    bounds = adaptive_pool_bounds(flat.size, out_len)
    sums = np.array([flat[a:b].sum() for a, b in bounds], dtype=np.int64)
    widths = np.array([b - a for a, b in bounds], dtype=np.int64)
    return sums, widths


__all__ = [
    "KERNEL_BLOCK",
    "ConvLayerSpec",
    "QuantTensor",
    "adaptive_avg_pool_codes",
    "adaptive_avg_pool_float",
    "adaptive_pool_bounds",
    "conv1d_acc",
    "conv1d_float",
    "conv1d_quant",
    "fold_batchnorm",
    "maxpool1d",
    "pool_output_length",
    "quantize",
    "relu",
]
