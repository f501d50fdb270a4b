"""Uniform quantization core.

Quantizer, scale/shift normalization, the straight-through estimator, and the
learned-parameter gradients for scale and zero-point. The forward ops record
custom backward rules on the autodiff tape so that per-layer scales and
zero-points train from the task loss like any other parameter.

Conventions, fixed for cross-platform determinism:
  * Round(.) breaks ties away from zero.
  * The in-range mask is open at both ends: a value exactly on a range
    endpoint counts as out of range for gradient purposes.
  * Scale/zero-point gradients reduce by plain summation over elements,
    accumulated exactly (correctly rounded) in double precision, then cast
    back to float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, custom_op, register_custom_grad

SUPPORTED_BITS = (2, 3, 4, 8)
SCALE_FLOOR = 1e-6

WEIGHT = "weight"
ACTIVATION = "activation"


def qrange(bits: int) -> tuple[int, int]:
    """Signed integer code range for a bit-width, e.g. [-8, +7] for 4 bits."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass
class QuantParams:
    """Per-tensor quantization state: bit-width, scale and zero-point.

    Weight params keep zero_point fixed at 0; only activations shift.
    """

    bits: int
    scale: float
    zero_point: float
    kind: str

    def __post_init__(self):
        qrange(self.bits)
        if self.kind not in (WEIGHT, ACTIVATION):
            raise ValueError(f"unknown param kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.kind == WEIGHT and self.zero_point != 0.0:
            raise ValueError("weight params carry zero_point == 0")
        self.scale = float(self.scale)
        self.zero_point = float(self.zero_point)

    @property
    def range(self) -> tuple[int, int]:
        return qrange(self.bits)


@dataclass
class QuantizedTensor:
    """Integer codes plus the params that map them back to real values."""

    values: np.ndarray
    params: QuantParams

    def __post_init__(self):
        lo, hi = self.params.range
        v = np.asarray(self.values)
        if v.dtype.kind != "i":
            raise ValueError(f"quantized values must be integers, got dtype {v.dtype}")
        if v.size and (v.min() < lo or v.max() > hi):
            raise ValueError(
                f"codes out of [{lo}, {hi}] for {self.params.bits}-bit tensor"
            )
        self.values = v


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero. Shape-preserving."""
    return np.floor(np.abs(x) + 0.5) * np.sign(x) + 0.0


def q_int(x: np.ndarray, bits: int) -> np.ndarray:
    """Clamp-then-round a real array onto the signed code range.

    Values above the upper bound map to it; values at or below the lower
    bound map to it; everything else rounds to the nearest integer.
    """
    lo, hi = qrange(bits)
    x = np.asarray(x, dtype=np.float32)
    r = round_half_away(x)
    return np.where(x > hi, hi, np.where(x <= lo, lo, r)).astype(np.int32)


def ste_mask(a_bar: np.ndarray, bits: int) -> np.ndarray:
    """1.0 strictly inside the code range, 0.0 on or outside the endpoints."""
    lo, hi = qrange(bits)
    a_bar = np.asarray(a_bar, dtype=np.float32)
    return ((a_bar > lo) & (a_bar < hi)).astype(np.float32)


def normalize_weight(w: np.ndarray, params: QuantParams) -> np.ndarray:
    if params.kind != WEIGHT:
        raise ValueError("normalize_weight requires weight params")
    return np.asarray(w, dtype=np.float32) / np.float32(params.scale)


def normalize_activation(a: np.ndarray, params: QuantParams) -> np.ndarray:
    if params.kind != ACTIVATION:
        raise ValueError("normalize_activation requires activation params")
    return (np.asarray(a, dtype=np.float32) - np.float32(params.zero_point)) / np.float32(
        params.scale
    )


def quantize(x: np.ndarray, params: QuantParams) -> QuantizedTensor:
    a_bar = (np.asarray(x, dtype=np.float32) - np.float32(params.zero_point)) / np.float32(
        params.scale
    )
    return QuantizedTensor(q_int(a_bar, params.bits), params)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return (
        np.float32(qt.params.scale) * qt.values.astype(np.float32)
        + np.float32(qt.params.zero_point)
    ).astype(np.float32)


def fake_quant_array(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize in real arithmetic, no tape recording."""
    return dequantize(quantize(x, params))


# -- reductions for the learned-parameter gradients ---------------------------
#
# Elementwise factors are float32 (matching the forward path); each product is
# formed exactly in float64. By default the sum is correctly rounded
# (math.fsum), so the result is independent of summation order and
# bit-reproducible against a scalar-loop oracle. Training loops may opt into
# the fast deterministic float64 pairwise reduction, which trades the
# order-independence guarantee for an order-of-magnitude speedup on large
# activation maps.

_fast_reduction = False


class fast_reductions:
    """Context: use numpy's pairwise float64 sum for scale/zero gradients."""

    def __enter__(self):
        global _fast_reduction
        self._prev, _fast_reduction = _fast_reduction, True

    def __exit__(self, *exc):
        global _fast_reduction
        _fast_reduction = self._prev


def _reduce_sum(terms: np.ndarray) -> np.float32:
    if _fast_reduction:
        return np.float32(float(np.sum(terms)) + 0.0)
    return np.float32(math.fsum(terms.ravel().tolist()) + 0.0)


def grad_scale(
    upstream: np.ndarray, a_bar: np.ndarray, a_hat: np.ndarray, mask: np.ndarray
) -> np.float32:
    """Scale gradient: sum of upstream*(a_hat - a_bar) in range, upstream*a_hat outside."""
    upstream = np.asarray(upstream, dtype=np.float32)
    if not (upstream.shape == a_bar.shape == a_hat.shape == mask.shape):
        raise ValueError(
            f"grad_scale: mismatched shapes {upstream.shape}, {a_bar.shape}, "
            f"{a_hat.shape}, {mask.shape}"
        )
    d = np.where(mask > 0, a_hat - a_bar, a_hat)  # float32 elementwise
    return _reduce_sum(upstream.astype(np.float64) * d.astype(np.float64))


def grad_zero_point(upstream: np.ndarray, mask: np.ndarray) -> np.float32:
    """Zero-point gradient: sum of upstream over out-of-range elements only."""
    upstream = np.asarray(upstream, dtype=np.float32)
    if upstream.shape != mask.shape:
        raise ValueError(f"grad_zero_point: mismatched shapes {upstream.shape}, {mask.shape}")
    return _reduce_sum(upstream.astype(np.float64) * (1.0 - mask.astype(np.float64)))


def grad_input(upstream: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Straight-through input gradient: upstream passed inside range, zero outside."""
    upstream = np.asarray(upstream, dtype=np.float32)
    return upstream * np.asarray(mask, dtype=np.float32)


# -- the training-path operator -----------------------------------------------

FAKE_QUANT_OP = "fake_quant"


def _fake_quant_backward(upstream: np.ndarray, ctx: dict):
    mask = ctx["mask"]
    dx = grad_input(upstream, mask)
    df = grad_scale(upstream, ctx["a_bar"], ctx["a_hat"], mask)
    dz = grad_zero_point(upstream, mask) if ctx["has_zero"] else None
    return dx, df, dz


register_custom_grad(FAKE_QUANT_OP, _fake_quant_backward)


def fake_quant(x: Tensor, scale: Tensor, zero_point: Tensor | None, bits: int) -> Tensor:
    """Quantization-simulated pass: scale * q_int((x - z)/scale, bits) + z.

    `scale` and `zero_point` are scalar tensors so their gradients train;
    pass zero_point=None for weight-style symmetric quantization. The saved
    context (normalized input, codes, in-range mask) feeds the custom
    backward rule.
    """
    f = np.float32(scale.data.reshape(()))
    z = np.float32(zero_point.data.reshape(())) if zero_point is not None else np.float32(0.0)
    a_bar = (x.data - z) / f
    codes = q_int(a_bar, bits)
    a_hat = codes.astype(np.float32)
    out = f * a_hat + z
    ctx = {
        "a_bar": a_bar,
        "a_hat": a_hat,
        "mask": ste_mask(a_bar, bits),
        "has_zero": zero_point is not None,
    }
    inputs = (x, scale) if zero_point is None else (x, scale, zero_point)
    return custom_op(FAKE_QUANT_OP, out, inputs, ctx)


def fake_quant_with(x: Tensor, params: QuantParams) -> Tensor:
    """fake_quant with fixed (non-learned) params."""
    f = Tensor(np.float32(params.scale))
    z = None if params.kind == WEIGHT else Tensor(np.float32(params.zero_point))
    return fake_quant(x, f, z, params.bits)
