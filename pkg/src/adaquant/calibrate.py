"""Quantization-parameter initialization from activation statistics.

Covers min/max endpoint-mapping initialization, and the traditional
signal-to-quantization-noise-ratio baseline that searches a (scale,
zero-point) grid exhaustively.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .layers import Model
from .quant import ACTIVATION, SCALE_FLOOR, WEIGHT, QuantParams, fake_quant_array

HIST_BINS = 256


@dataclass
class ActivationStats:
    """Per-layer summary over calibration batches: extrema, mean, histogram."""

    min: float
    max: float
    mean: float
    histogram: np.ndarray  # HIST_BINS int64 counts over [min, max]

    def __post_init__(self):
        if not (self.min <= self.mean <= self.max):
            raise ValueError(f"inconsistent stats: min {self.min}, mean {self.mean}, max {self.max}")
        if self.histogram.shape != (HIST_BINS,):
            raise ValueError(f"histogram must have {HIST_BINS} bins")


def stats_of(samples: np.ndarray) -> ActivationStats:
    flat = np.asarray(samples, dtype=np.float32).ravel()
    lo = float(flat.min())
    hi = float(flat.max())
    mean = float(np.mean(flat, dtype=np.float64))
    if hi > lo:
        hist, _ = np.histogram(flat, bins=HIST_BINS, range=(lo, hi))
    else:
        hist = np.zeros(HIST_BINS, dtype=np.int64)
        hist[0] = flat.size
    return ActivationStats(lo, hi, max(lo, min(hi, mean)), hist.astype(np.int64))


def collect_stats(model: Model, batches: list[np.ndarray]) -> dict[str, ActivationStats]:
    """Run calibration batches through the float model, return per-layer stats.

    Keys are "input" and "layer{i}" for the output of g at each layer.
    """
    if not batches:
        raise ValueError("collect_stats needs at least one calibration batch")
    collected: dict[str, list[np.ndarray]] = {}
    with Tensor.no_grad():
        for batch in batches:
            record: dict[str, np.ndarray] = {}
            model.forward_float(batch, record=record)
            for key, act in record.items():
                collected.setdefault(key, []).append(act.ravel())
    return {key: stats_of(np.concatenate(parts)) for key, parts in collected.items()}


def init_quant_params(stats: ActivationStats, bits: int, shift_enabled: bool) -> QuantParams:
    """Map the observed range onto the code range.

    With shifting, min and max land exactly on the lower/upper code bounds.
    Without shifting the zero-point stays 0 and the scale covers whichever
    side of the range is binding.
    """
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    if stats.max <= stats.min:
        return QuantParams(bits, SCALE_FLOOR, stats.min if shift_enabled else 0.0, ACTIVATION)
    if shift_enabled:
        f = (stats.max - stats.min) / (2**bits - 1)
        z = stats.min + 2 ** (bits - 1) * f
        return QuantParams(bits, max(f, SCALE_FLOOR), z, ACTIVATION)
    f = max(abs(stats.min) / -lo, stats.max / hi if stats.max > 0 else 0.0)
    return QuantParams(bits, max(f, SCALE_FLOOR), 0.0, ACTIVATION)


def weight_quant_params(w: np.ndarray, bits: int) -> QuantParams:
    """Symmetric (zero-point 0) params covering the weight extrema."""
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    wmin, wmax = float(np.min(w)), float(np.max(w))
    f = max(abs(wmin) / -lo, wmax / hi if wmax > 0 else 0.0)
    return QuantParams(bits, max(f, SCALE_FLOOR), 0.0, WEIGHT)


def sqnr_db(x: np.ndarray, params: QuantParams) -> float:
    """10*log10 of signal power over quantization-error power; inf for zero error."""
    x = np.asarray(x, dtype=np.float32)
    err = x.astype(np.float64) - fake_quant_array(x, params).astype(np.float64)
    num = float(np.sum(x.astype(np.float64) ** 2))
    den = float(np.sum(err**2))
    if den == 0.0:
        return math.inf
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def sqnr_search_grid(
    sample: np.ndarray, bits: int, resolution: int, shift_enabled: bool = True
) -> list[tuple[float, float]]:
    """The (scale, zero_point) grid sqnr_linear_search scans.

    Scales form a geometric ladder around the min/max initialization (which
    is itself a grid point); zero-points sweep the sample range linearly,
    plus the initialization's own zero-point. Without shifting, zero-points
    are pinned to 0.
    """
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    sample = np.asarray(sample, dtype=np.float32)
    st = stats_of(sample)
    init = init_quant_params(st, bits, shift_enabled)
    exponents = np.linspace(-2.0, 2.0, resolution if resolution % 2 else resolution + 1)
    scales = [max(float(init.scale * 2.0**e), SCALE_FLOOR) for e in exponents]
    if shift_enabled:
        zeros = [float(z) for z in np.linspace(st.min, st.max, resolution)]
        zeros.append(float(init.zero_point))
    else:
        zeros = [0.0]
    grid = [(f, z) for f in scales for z in zeros]
    return grid


def sqnr_linear_search(
    sample: np.ndarray,
    bits: int,
    resolution: int = 32,
    shift_enabled: bool = True,
    kind: str = ACTIVATION,
) -> QuantParams:
    """Exhaustive grid search maximizing SQNR; ties keep the earliest point."""
    if np.asarray(sample).size == 0:
        raise ValueError("sqnr_linear_search needs a nonempty sample")
    if kind == WEIGHT:
        shift_enabled = False
    best: tuple[float, QuantParams] | None = None
    for f, z in sqnr_search_grid(sample, bits, resolution, shift_enabled):
        params = QuantParams(bits, f, z if kind == ACTIVATION else 0.0, kind)
        score = sqnr_db(sample, params)
        if best is None or score > best[0]:
            best = (score, params)
    return best[1]


# -- model-level calibration ----------------------------------------------------

SQNR_SAMPLE_CAP = 16384


def _subsample(flat: np.ndarray, cap: int = SQNR_SAMPLE_CAP) -> np.ndarray:
    if flat.size <= cap:
        return flat
    stride = flat.size // cap
    return flat[:: stride][:cap]


def calibrate_model(
    model: Model,
    calib_batches: list[np.ndarray],
    bits: int,
    first_last_bits: int = 8,
    shift_enabled: bool = True,
    method: str = "minmax",
    sqnr_resolution: int = 32,
) -> dict[str, ActivationStats]:
    """Attach quantization params to every layer of a float model.

    Bit-width policy: the first and last layers (weights, plus the model
    input and final output activation) use `first_last_bits`; everything
    else uses the global `bits`. Returns the collected activation stats.
    """
    if method not in ("minmax", "sqnr"):
        raise ValueError(f"unknown calibration method {method!r}")
    if not calib_batches:
        raise ValueError("calibration needs at least one batch")

    collected: dict[str, list[np.ndarray]] = {}
    with Tensor.no_grad():
        for batch in calib_batches:
            record: dict[str, np.ndarray] = {}
            model.forward_float(batch, record=record)
            for key, act in record.items():
                collected.setdefault(key, []).append(act.ravel())
    acts = {key: np.concatenate(parts) for key, parts in collected.items()}
    stats = {key: stats_of(a) for key, a in acts.items()}

    last = len(model.layers) - 1

    def act_params(key: str, abits: int) -> QuantParams:
        if method == "sqnr":
            return sqnr_linear_search(
                _subsample(acts[key]), abits, sqnr_resolution, shift_enabled
            )
        return init_quant_params(stats[key], abits, shift_enabled)

    model.shift_enabled = shift_enabled
    model.attach_input_quant(act_params("input", first_last_bits))
    for i, layer in enumerate(model.layers):
        wbits = first_last_bits if i in (0, last) else bits
        abits = first_last_bits if i == last else bits
        if method == "sqnr":
            wp = sqnr_linear_search(
                _subsample(layer.weight.data.ravel()), wbits, sqnr_resolution, kind=WEIGHT
            )
        else:
            wp = weight_quant_params(layer.weight.data, wbits)
        layer.attach_quant(wp, act_params(f"layer{i}", abits))
    return stats
