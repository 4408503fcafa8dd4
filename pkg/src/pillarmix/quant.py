"""Symmetric INT8 quantization math, FP16 simulation, and min/max observers.

The INT8 scheme maps x to clamp(round_half_even(x / scale), -128, 127) with
the zero point pinned at 0; the scale comes from the largest magnitude seen
during calibration, max(|min|, |max|) / 127. FP16 layers are simulated by a
binary16 round trip that saturates at +-65504 instead of overflowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "DType",
    "FP16_MAX",
    "MinMaxObserver",
    "PerChannelQuantParams",
    "Q_MAX",
    "Q_MIN",
    "QuantParams",
    "compute_scale",
    "dequantize",
    "fake_quant",
    "fake_quant_per_channel",
    "fp16_roundtrip",
    "observe",
    "quantize",
    "weight_quant_params",
]

Q_MIN = -128
Q_MAX = 127
FP16_MAX = 65504.0


class DType(str, Enum):
    """Per-layer datatype tag."""

    FP32 = "fp32"
    FP16 = "fp16"
    INT8 = "int8"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class QuantParams:
    """Symmetric per-tensor quantization parameters (zero point fixed at 0)."""

    scale: float
    zero_point: int = 0
    q_min: int = Q_MIN
    q_max: int = Q_MAX

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")


@dataclass(frozen=True)
class PerChannelQuantParams:
    """Per-output-channel weight scales (optional mode; axis 0 is the channel)."""

    scales: np.ndarray
    q_min: int = Q_MIN
    q_max: int = Q_MAX

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 1 or not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("per-channel scales must be a 1D positive finite array")
        object.__setattr__(self, "scales", scales)


def compute_scale(x_min: float, x_max: float) -> QuantParams:
    """Derive the symmetric scale max(|x_min|, |x_max|) / 127.

    A degenerate all-zero range falls back to scale 1.0; every value of such
    a tensor quantizes to 0 regardless of the scale chosen.
    """
    if not (math.isfinite(x_min) and math.isfinite(x_max)):
        raise ValueError(f"non-finite calibration range ({x_min}, {x_max})")
    if x_min > x_max:
        raise ValueError(f"calibration range has min {x_min} > max {x_max}")
    max_abs = max(abs(x_min), abs(x_max))
    if max_abs == 0.0:
        return QuantParams(scale=1.0)
    return QuantParams(scale=max_abs / Q_MAX)


def quantize(x, qp: QuantParams):
    """clamp(round_half_even(x / scale), -128, 127); scalar in, int out."""
    xq = np.clip(np.rint(np.asarray(x, dtype=np.float64) / qp.scale), qp.q_min, qp.q_max)
    if np.ndim(x) == 0:
        return int(xq)
    return xq.astype(np.int32)


def dequantize(x_q, qp: QuantParams):
    """Map integer codes back to reals: x_q * scale."""
    out = np.asarray(x_q, dtype=np.float64) * qp.scale
    if np.ndim(x_q) == 0:
        return float(out)
    return out


def fake_quant(t: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize in real arithmetic; shape preserved, float32 out."""
    return dequantize(quantize(t, qp), qp).astype(np.float32)


def weight_quant_params(weight: np.ndarray, per_channel: bool = False):
    """One-shot quant params from a (folded) weight tensor.

    Per-tensor by default; per_channel=True yields one scale per output
    channel (axis 0), the common deployment convention for conv/linear.
    """
    w = np.asarray(weight, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weight tensor contains non-finite values")
    if not per_channel:
        return compute_scale(float(w.min(initial=0.0)), float(w.max(initial=0.0)))
    flat = w.reshape(w.shape[0], -1)
    max_abs = np.abs(flat).max(axis=1)
    scales = np.where(max_abs == 0.0, 1.0, max_abs / Q_MAX)
    return PerChannelQuantParams(scales=scales)


def fake_quant_per_channel(weight: np.ndarray, qp: PerChannelQuantParams) -> np.ndarray:
    """fake_quant with one scale per output channel (axis 0)."""
    w = np.asarray(weight, dtype=np.float64)
    scales = qp.scales.reshape((-1,) + (1,) * (w.ndim - 1))
    codes = np.clip(np.rint(w / scales), qp.q_min, qp.q_max)
    return (codes * scales).astype(np.float32)


def fp16_roundtrip(t: np.ndarray) -> np.ndarray:
    """Round each value to binary16 and back, saturating at +-65504."""
    clipped = np.clip(np.asarray(t, dtype=np.float32), -FP16_MAX, FP16_MAX)
    return clipped.astype(np.float16).astype(np.float32)


@dataclass(frozen=True)
class MinMaxObserver:
    """Running min/max over observed tensors; count == 0 is the empty sentinel."""

    running_min: float = math.inf
    running_max: float = -math.inf
    count: int = 0

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def merge(self, other: "MinMaxObserver") -> "MinMaxObserver":
        if other.is_empty:
            return self
        if self.is_empty:
            return other
        return MinMaxObserver(
            running_min=min(self.running_min, other.running_min),
            running_max=max(self.running_max, other.running_max),
            count=self.count + other.count,
        )

    def quant_params(self) -> QuantParams:
        if self.is_empty:
            raise ValueError("cannot derive quant params from an empty observer")
        return compute_scale(self.running_min, self.running_max)


def observe(obs: MinMaxObserver, t: np.ndarray) -> MinMaxObserver:
    """Widen the observer to cover every element of t; count goes up by one."""
    t = np.asarray(t)
    if t.size == 0:
        return obs
    t_min = float(t.min())
    t_max = float(t.max())
    if not (math.isfinite(t_min) and math.isfinite(t_max)):
        raise ValueError("observed tensor contains non-finite values")
    return obs.merge(MinMaxObserver(running_min=t_min, running_max=t_max, count=1))
