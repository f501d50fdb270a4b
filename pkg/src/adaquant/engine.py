"""Integer-only inference engine.

Lowers a trained quantization-aware model to integer form: weights frozen to
codes, biases folded (zero-point correction included) into 32-bit integers at
accumulator scale, and all real-valued rescaling factors encoded as 16-bit
fixed-point multipliers. Every lowered layer then executes one uniform op
sequence, with no real arithmetic anywhere on the layer path:

    quantized conv/matmul -> bias add -> activation -> requantize
        -> zero-point shift -> clamp [-> max-pool]

Requantization uses a 64-bit intermediate and rounds half away from zero.
Float arithmetic appears only at lowering time and at the model boundary
(input quantization, output dequantization).
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .autodiff import _col2im, _conv_out_dim, _im2col  # shared gather/scatter helpers
from .layers import IDENTITY, LEAKY_RELU, RELU, SWISH, Activation, Model
from .quant import ACTIVATION, QuantParams, q_int, qrange, round_half_away

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
MANTISSA_LO, MANTISSA_HI = 2**14, 2**15  # normalized positive mantissa range
SHIFT_MIN, SHIFT_MAX = -32, 32
SWISH_LUT_SIZE = 512  # indexed by a 9-bit requantized intermediate


class LoweringError(ValueError):
    """A layer cannot be lowered to integer form; message carries the layer id."""


class EngineError(RuntimeError):
    """Integer execution contract violated (overflow or non-integer operand)."""


# -- execution audit ----------------------------------------------------------

_audit_log: list[tuple[str, str]] | None = None


@contextmanager
def audit():
    """Record (stage, dtype-kind) for every op the layer path executes."""
    global _audit_log
    prev, _audit_log = _audit_log, []
    try:
        yield _audit_log
    finally:
        _audit_log = prev


def _checked(stage: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind not in "iu":
        raise EngineError(f"real-valued operand reached integer stage {stage!r}: {arr.dtype}")
    if _audit_log is not None:
        _audit_log.append((stage, arr.dtype.kind))
    return arr


# -- fixed-point multipliers --------------------------------------------------

@dataclass(frozen=True)
class FixedPointMultiplier:
    """A positive real factor as mantissa * 2**(shift - 15).

    The mantissa is a signed 16-bit integer normalized into [2^14, 2^15), so
    the encoding error is at most one part in 2^14 of the true value.
    """

    mantissa: int
    shift: int

    def __post_init__(self):
        if not (MANTISSA_LO <= self.mantissa < MANTISSA_HI):
            raise ValueError(f"mantissa {self.mantissa} outside [{MANTISSA_LO}, {MANTISSA_HI})")
        if not (SHIFT_MIN <= self.shift <= SHIFT_MAX):
            raise ValueError(f"shift {self.shift} outside [{SHIFT_MIN}, {SHIFT_MAX}]")

    @property
    def value(self) -> float:
        return self.mantissa * 2.0 ** (self.shift - 15)

    def apply(self, acc: np.ndarray) -> np.ndarray:
        """round(acc * mantissa >> (15 - shift)), half away from zero, in int64."""
        acc = _checked("requant-in", np.asarray(acc))
        t = acc.astype(np.int64) * self.mantissa
        return _round_shift(t, 15 - self.shift)


def _round_shift(t: np.ndarray, s: int) -> np.ndarray:
    if s < 0:
        return t << (-s)
    if s == 0:
        return t.copy()
    half = np.int64(1) << (s - 1)
    neg = t < 0
    out = np.empty_like(t)
    out[~neg] = (t[~neg] + half) >> s
    out[neg] = -((-t[neg] + half) >> s)
    return out


def compute_requant(f_w: float, f_a: float, f_a_next: float) -> FixedPointMultiplier:
    """Encode the combined rescale factor f_w * f_a / f_a_next."""
    if min(f_w, f_a, f_a_next) <= 0:
        raise LoweringError("requantization needs strictly positive scales")
    return encode_multiplier(f_w * f_a / f_a_next)


def encode_multiplier(m: float) -> FixedPointMultiplier:
    if not (m > 0) or not math.isfinite(m):
        raise LoweringError(f"multiplier {m} is not a positive finite real")
    _, e = math.frexp(m)  # m = frac * 2**e with frac in [0.5, 1)
    mant = int(round_half_away(np.float64(m * 2.0 ** (15 - e))))
    if mant == MANTISSA_HI:
        mant, e = MANTISSA_LO, e + 1
    if not (SHIFT_MIN <= e <= SHIFT_MAX):
        raise LoweringError(f"multiplier {m:g} outside representable exponent range")
    return FixedPointMultiplier(mant, e)


# -- lowered model ------------------------------------------------------------

@dataclass
class SwishTable:
    """Accumulator-domain swish: index (9-bit) -> swish value in accumulator units."""

    idx_mult: FixedPointMultiplier  # maps accumulator units onto the index grid
    idx_center: int  # index-grid offset of the table's first entry + 256
    table: np.ndarray  # int32[512]

    def apply(self, acc: np.ndarray) -> np.ndarray:
        idx = self.idx_mult.apply(acc) - self.idx_center
        np.clip(idx, -256, 255, out=idx)
        return self.table.astype(np.int64)[idx + 256]


@dataclass
class LoweredLayer:
    kind: str
    stride: int
    padding: int
    pool: int
    activation: Activation
    weight_codes: np.ndarray  # int8, [K,C,kh,kw] or [O,I]
    w_bits: int
    folded_bias: np.ndarray  # int32, accumulator scale
    requant: FixedPointMultiplier
    out_zero: int  # additive: round(-z_out / f_out)
    bits_in: int
    bits_out: int
    pad_code: int
    alpha_mult: FixedPointMultiplier | None = None
    swish: SwishTable | None = None


@dataclass
class LoweredModel:
    layers: list[LoweredLayer]
    in_params: QuantParams  # input quantization (boundary)
    out_params: QuantParams  # output dequantization (boundary)
    input_shape: tuple[int, ...]

    def forward_codes(self, codes: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                codes = integer_layer_forward(codes, layer)
            except EngineError as e:
                raise EngineError(f"layer {i}: {e}") from e
        return codes

    def forward(self, x: np.ndarray) -> np.ndarray:
        codes = quantize_input(x, self.in_params)
        codes = self.forward_codes(codes)
        return dequantize_output(codes, self.out_params)


def quantize_input(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Boundary conversion into codes; the one float op before the layer path."""
    a_bar = (np.asarray(x, dtype=np.float32) - np.float32(params.zero_point)) / np.float32(
        params.scale
    )
    return q_int(a_bar, params.bits).astype(np.int64)


def dequantize_output(codes: np.ndarray, params: QuantParams) -> np.ndarray:
    return (
        np.float32(params.scale) * codes.astype(np.float32) + np.float32(params.zero_point)
    ).astype(np.float32)


# -- lowering -----------------------------------------------------------------

def fold_bias(
    bias: np.ndarray, f_w: float, f_a: float, z_a: float, weight_codes: np.ndarray
) -> np.ndarray:
    """Fold the zero-point correction into a 32-bit bias at accumulator scale.

    Per output channel k: round((b_k + f_w*z_a*sum_j W_codes[k,j]) / (f_w*f_a)).
    """
    if min(f_w, f_a) <= 0:
        raise LoweringError("fold_bias needs positive scales")
    k = weight_codes.shape[0]
    wsum = weight_codes.reshape(k, -1).sum(axis=1, dtype=np.int64)
    real = bias.astype(np.float64) + f_w * z_a * wsum
    folded = round_half_away(real / (f_w * f_a)).astype(np.int64)
    if folded.min() < INT32_MIN or folded.max() > INT32_MAX:
        raise LoweringError(
            f"folded bias range [{folded.min()}, {folded.max()}] exceeds 32-bit"
        )
    return folded.astype(np.int32)


def _swish_f64(y: np.ndarray) -> np.ndarray:
    return y / (1.0 + np.exp(-y))


def _build_swish_table(
    acc_scale: float, out_params: QuantParams, acc_bound: int
) -> SwishTable:
    """Size the 9-bit index grid to the region where the output code varies.

    Outside that region swish is flat enough (or the output clamps) that the
    end entries are exact; inside, 512 entries keep the table's contribution
    under one output step.
    """
    lo, hi = out_params.range
    band_hi = out_params.zero_point + out_params.scale * hi
    y_hi = max(band_hi + 0.6, 1.0)
    y_hi = min(y_hi, acc_scale * acc_bound + 1.0)
    ys = np.linspace(-16.0, y_hi, 16001)
    codes = q_int((_swish_f64(ys) - out_params.zero_point) / out_params.scale, out_params.bits)
    changing = np.nonzero(codes != codes[0])[0]
    y_lo = ys[changing[0] - 1] - 0.1 if changing.size else -1.0
    y_lo = min(y_lo, -1.0)  # always cover the swish minimum region
    f_idx = (y_hi - y_lo) / (SWISH_LUT_SIZE - 2)
    idx_mult = encode_multiplier(acc_scale / f_idx)
    y_center = 0.5 * (y_lo + y_hi)
    idx_center = int(round_half_away(np.float64(y_center / f_idx)))
    slots = np.arange(SWISH_LUT_SIZE) - 256 + idx_center
    table = round_half_away(_swish_f64(slots * f_idx) / acc_scale)
    table = np.clip(table, INT32_MIN, INT32_MAX).astype(np.int32)
    return SwishTable(idx_mult, idx_center, table)


def lower_layer(
    layer, in_params: QuantParams, layer_id: int
) -> tuple[LoweredLayer, dict]:
    spec = layer.spec
    f_w = float(layer.w_scale.data)
    f_in, z_in = in_params.scale, in_params.zero_point
    out_params = layer.act_params()
    f_out, z_out = out_params.scale, out_params.zero_point

    w_norm = layer.weight.data / np.float32(f_w)
    codes = q_int(w_norm, layer.w_bits).astype(np.int8)
    try:
        folded = fold_bias(layer.bias.data, f_w, f_in, z_in, codes)
        requant = compute_requant(f_w, f_in, f_out)
    except LoweringError as e:
        raise LoweringError(f"layer {layer_id}: {e}") from e

    out_zero = int(round_half_away(np.float64(-z_out / f_out)))
    lo_out, hi_out = out_params.range
    pad_code = int(q_int(np.float32(-z_in / f_in), in_params.bits))

    # Worst-case 32-bit accumulator bound: per-channel absolute weight mass
    # times the largest input code magnitude, plus the folded bias.
    k = codes.shape[0]
    abs_mass = np.abs(codes.astype(np.int64)).reshape(k, -1).sum(axis=1)
    in_mag = 2 ** (in_params.bits - 1)
    acc_bound = int((abs_mass * in_mag + np.abs(folded.astype(np.int64))).max())
    if acc_bound > INT32_MAX:
        raise LoweringError(
            f"layer {layer_id}: worst-case accumulator {acc_bound} exceeds 32-bit"
        )
    if abs(out_zero) > 4 * (hi_out - lo_out):
        raise LoweringError(
            f"layer {layer_id}: output zero-point code {out_zero} far outside "
            f"the {out_params.bits}-bit range"
        )

    alpha_mult = None
    swish = None
    if spec.activation.kind == LEAKY_RELU:
        try:
            alpha_mult = encode_multiplier(spec.activation.alpha)
        except LoweringError as e:
            raise LoweringError(f"layer {layer_id}: leaky slope: {e}") from e
    elif spec.activation.kind == SWISH:
        swish = _build_swish_table(f_w * f_in, out_params, acc_bound)

    lowered = LoweredLayer(
        kind=spec.kind,
        stride=spec.stride,
        padding=spec.padding,
        pool=spec.pool,
        activation=spec.activation,
        weight_codes=codes,
        w_bits=layer.w_bits,
        folded_bias=folded,
        requant=requant,
        out_zero=out_zero,
        bits_in=in_params.bits,
        bits_out=out_params.bits,
        pad_code=pad_code,
        alpha_mult=alpha_mult,
        swish=swish,
    )
    target = f_w * f_in / f_out
    report = {
        "layer": layer_id,
        "kind": spec.kind,
        "activation": spec.activation.kind,
        "f_w": f_w,
        "f_in": f_in,
        "z_in": z_in,
        "f_out": f_out,
        "z_out": z_out,
        "multiplier_mantissa": requant.mantissa,
        "multiplier_shift": requant.shift,
        "multiplier_value": requant.value,
        "multiplier_rel_error": abs(requant.value - target) / target,
        "out_zero": out_zero,
        "out_zero_in_range": lo_out <= out_zero <= hi_out,
        "pad_code": pad_code,
        "bias_min": int(folded.min()),
        "bias_max": int(folded.max()),
        "accumulator_bound": acc_bound,
    }
    return lowered, report


def lower_model(model: Model) -> tuple[LoweredModel, dict]:
    """Freeze a trained QAT model to integer-only form, with a lowering report."""
    if not model.quantized:
        raise LoweringError("model has no quantization params; calibrate and train first")
    in_params = model.input_params()
    layers: list[LoweredLayer] = []
    reports = []
    prev = in_params
    for i, layer in enumerate(model.layers):
        lowered, rep = lower_layer(layer, prev, i)
        layers.append(lowered)
        reports.append(rep)
        prev = layer.act_params()
    lm = LoweredModel(layers, in_params, prev, model.input_shape)
    report = {"input_params": vars(in_params).copy(), "layers": reports}
    return lm, report


# -- integer execution --------------------------------------------------------

def integer_activation(acc: np.ndarray, layer: LoweredLayer) -> np.ndarray:
    """Apply g in the accumulator domain; scaling with f_w*f_a commutes for
    ReLU/LeakyReLU, and swish goes through the per-layer lookup table."""
    kind = layer.activation.kind
    if kind == IDENTITY:
        return acc
    if kind == RELU:
        return np.maximum(acc, 0)
    if kind == LEAKY_RELU:
        neg = layer.alpha_mult.apply(acc)
        return np.where(acc >= 0, acc, neg)
    return layer.swish.apply(acc)


def _int_maxpool(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))


def integer_layer_forward(a_codes: np.ndarray, layer: LoweredLayer) -> np.ndarray:
    """The single layer-execution routine every lowered layer runs."""
    a = _checked("input", np.asarray(a_codes)).astype(np.int64)
    lo_in, hi_in = qrange(layer.bits_in)
    if a.size and (a.min() < lo_in or a.max() > hi_in):
        raise EngineError(f"input codes outside {layer.bits_in}-bit range")
    w = layer.weight_codes.astype(np.int64)

    if layer.kind == "conv2d":
        n, c, h, ww = a.shape
        k, _, kh, kw = w.shape
        if layer.padding:
            a = np.pad(
                a,
                ((0, 0), (0, 0), (layer.padding, layer.padding), (layer.padding, layer.padding)),
                constant_values=layer.pad_code,
            )
        oh = _conv_out_dim(h, kh, layer.stride, layer.padding)
        ow = _conv_out_dim(ww, kw, layer.stride, layer.padding)
        cols = _im2col(a, kh, kw, layer.stride, oh, ow)
        acc = np.matmul(w.reshape(k, -1), cols)
        acc = _checked("matmul", acc)
        acc = acc + layer.folded_bias.astype(np.int64)[None, :, None]
        acc = _checked("bias", acc).reshape(n, k, oh, ow)
    else:
        if a.ndim > 2:
            a = a.reshape(a.shape[0], -1)
        acc = a @ w.T
        acc = _checked("matmul", acc)
        acc = acc + layer.folded_bias.astype(np.int64)[None, :]
        acc = _checked("bias", acc)

    if acc.size and max(-int(acc.min()), int(acc.max())) > INT32_MAX:
        raise EngineError("accumulator overflow: lowering bound violated")

    acc = _checked("activation", integer_activation(acc, layer))
    out = _checked("requant", layer.requant.apply(acc))
    out = _checked("zero_shift", out + layer.out_zero)
    lo, hi = qrange(layer.bits_out)
    out = _checked("clamp", np.clip(out, lo, hi))
    if layer.pool > 1:
        out = _checked("pool", _int_maxpool(out, layer.pool))
    return out


def residual_add_int(
    a_codes: np.ndarray,
    a_params: QuantParams,
    b_codes: np.ndarray,
    b_params: QuantParams,
    out_params: QuantParams,
) -> np.ndarray:
    """Shortcut add: requantize both operands to the output scale, reconcile
    zero-points with one precomputed constant, sum in 32-bit, clamp."""
    if a_codes.shape != b_codes.shape:
        raise EngineError(f"residual_add_int: shapes {a_codes.shape} vs {b_codes.shape}")
    ma = encode_multiplier(a_params.scale / out_params.scale)
    mb = encode_multiplier(b_params.scale / out_params.scale)
    const = int(
        round_half_away(
            np.float64(
                (a_params.zero_point + b_params.zero_point - out_params.zero_point)
                / out_params.scale
            )
        )
    )
    total = ma.apply(np.asarray(a_codes)) + mb.apply(np.asarray(b_codes)) + const
    lo, hi = out_params.range
    return _checked("residual", np.clip(total, lo, hi))
