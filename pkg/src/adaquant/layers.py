"""Desk-scale network building blocks.

Quantization-wrapped conv/linear layers, the activation zoo, and the task
loss. A layer's training-path forward simulates integer execution in real
arithmetic: fake-quantized weights, convolution, activation, then
fake-quantization of the output with that layer's own learned scale and
zero-point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import ShapeMismatch, Tensor
from .quant import ACTIVATION, WEIGHT, QuantParams, fake_quant, q_int

IDENTITY = "identity"
RELU = "relu"
LEAKY_RELU = "leaky_relu"
SWISH = "swish"

ACTIVATION_KINDS = (IDENTITY, RELU, LEAKY_RELU, SWISH)

# Conventional detector setting for the leaky slope; configurable per layer.
DEFAULT_LEAKY_ALPHA = 0.1


@dataclass(frozen=True)
class Activation:
    kind: str = IDENTITY
    alpha: float = DEFAULT_LEAKY_ALPHA

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")


def activation_apply(x: Tensor, act: Activation) -> Tensor:
    if act.kind == IDENTITY:
        return x
    if act.kind == RELU:
        return x.relu()
    if act.kind == LEAKY_RELU:
        return x.leaky_relu(act.alpha)
    return x.swish()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: {n} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    softmax = ex / ex.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(n), labels] - np.log(ex.sum(axis=1)))
    loss = np.float32(nll.mean())

    def bw(g):
        if logits.requires_grad:
            d = softmax.copy()
            d[np.arange(n), labels] -= 1.0
            logits._accumulate(g * d / np.float32(n))

    return Tensor._make(loss, (logits,), bw)


@dataclass
class LayerSpec:
    """Geometry and activation of one layer; parameters live on QuantLayer."""

    kind: str  # "conv2d" | "linear"
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 1  # post-activation max-pool window, 1 = none
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        if self.kind not in ("conv2d", "linear"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and self.kernel < 1:
            raise ValueError("conv2d layers need kernel >= 1")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels)


class QuantLayer:
    """One layer's parameters plus its learned quantization state.

    Weight and bias are float leaves. After `attach_quant`, the layer also
    owns scalar leaves for the weight scale and the output-activation scale
    and zero-point; bias stays real-valued until lowering.
    """

    def __init__(self, spec: LayerSpec, weight: np.ndarray, bias: np.ndarray):
        if tuple(weight.shape) != spec.weight_shape():
            raise ShapeMismatch(
                f"weight shape {weight.shape} != spec shape {spec.weight_shape()}"
            )
        self.spec = spec
        self.weight = Tensor(weight, requires_grad=True, name="w")
        self.bias = Tensor(bias, requires_grad=True, name="b")
        self.w_bits: int | None = None
        self.a_bits: int | None = None
        self.w_scale: Tensor | None = None
        self.a_scale: Tensor | None = None
        self.a_zero: Tensor | None = None

    @property
    def quantized(self) -> bool:
        return self.w_scale is not None

    def attach_quant(self, weight_params: QuantParams, act_params: QuantParams) -> None:
        if weight_params.kind != WEIGHT or act_params.kind != ACTIVATION:
            raise ValueError("attach_quant expects (weight, activation) params")
        self.w_bits = weight_params.bits
        self.a_bits = act_params.bits
        self.w_scale = Tensor(np.float32(weight_params.scale), requires_grad=True, name="f_w")
        self.a_scale = Tensor(np.float32(act_params.scale), requires_grad=True, name="f_a")
        self.a_zero = Tensor(np.float32(act_params.zero_point), requires_grad=True, name="z_a")

    def weight_params(self) -> QuantParams:
        return QuantParams(self.w_bits, float(self.w_scale.data), 0.0, WEIGHT)

    def act_params(self) -> QuantParams:
        return QuantParams(
            self.a_bits, float(self.a_scale.data), float(self.a_zero.data), ACTIVATION
        )


def _pad_value(scale: float, zero: float, bits: int) -> float:
    # The padding constant is the quantization grid point nearest real zero,
    # so the integer engine can pad code tensors with a single integer.
    code = int(q_int(np.float32(-zero / scale), bits))
    return float(np.float32(scale) * np.float32(code) + np.float32(zero))


def layer_forward_float(a: Tensor, layer: QuantLayer) -> Tensor:
    spec = layer.spec
    if spec.kind == "linear" and a.data.ndim > 2:
        a = a.reshape(a.shape[0], -1)
    if spec.kind == "conv2d":
        y = autodiff.conv2d(a, layer.weight, layer.bias, spec.stride, spec.padding)
    else:
        y = autodiff.linear(a, layer.weight, layer.bias)
    h = activation_apply(y, spec.activation)
    if spec.pool > 1:
        h = autodiff.max_pool2d(h, spec.pool)
    return h


def layer_forward_qat(
    a: Tensor, layer: QuantLayer, in_scale: float, in_zero: float, in_bits: int
) -> Tensor:
    """Training-path forward: fq(weights) -> conv -> activation -> fq(output).

    `in_*` describe the already-fake-quantized input; they fix the padding
    constant so the real and integer paths pad identically.
    """
    if not layer.quantized:
        raise ValueError("layer has no quantization params attached; calibrate first")
    spec = layer.spec
    if spec.kind == "linear" and a.data.ndim > 2:
        a = a.reshape(a.shape[0], -1)
    wq = fake_quant(layer.weight, layer.w_scale, None, layer.w_bits)
    if spec.kind == "conv2d":
        pv = _pad_value(in_scale, in_zero, in_bits) if spec.padding else 0.0
        y = autodiff.conv2d(a, wq, layer.bias, spec.stride, spec.padding, pad_value=pv)
    else:
        y = autodiff.linear(a, wq, layer.bias)
    h = activation_apply(y, spec.activation)
    h = fake_quant(h, layer.a_scale, layer.a_zero, layer.a_bits)
    if spec.pool > 1:
        h = autodiff.max_pool2d(h, spec.pool)
    return h


def residual_add(a: Tensor, b: Tensor, scale: Tensor, zero: Tensor, bits: int) -> Tensor:
    """Two-branch shortcut add in real domain, re-fake-quantized with its own params."""
    return fake_quant(a + b, scale, zero, bits)


class Model:
    """An ordered stack of QuantLayers plus input quantization state."""

    def __init__(self, layers: list[QuantLayer], input_shape: tuple[int, ...]):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # per-sample, e.g. (1, 32, 32)
        self.in_bits: int | None = None
        self.in_scale: Tensor | None = None
        self.in_zero: Tensor | None = None
        self.shift_enabled = True

    @property
    def quantized(self) -> bool:
        return self.in_scale is not None and all(l.quantized for l in self.layers)

    def attach_input_quant(self, params: QuantParams) -> None:
        if params.kind != ACTIVATION:
            raise ValueError("input params must be activation-kind")
        self.in_bits = params.bits
        self.in_scale = Tensor(np.float32(params.scale), requires_grad=True, name="f_in")
        self.in_zero = Tensor(np.float32(params.zero_point), requires_grad=True, name="z_in")

    def input_params(self) -> QuantParams:
        return QuantParams(
            self.in_bits, float(self.in_scale.data), float(self.in_zero.data), ACTIVATION
        )

    def forward_float(self, x: np.ndarray, record: dict | None = None) -> Tensor:
        a = Tensor(x)
        if record is not None:
            record["input"] = a.data
        for i, layer in enumerate(self.layers):
            a = layer_forward_float(a, layer)
            if record is not None:
                record[f"layer{i}"] = a.data
        return a

    def forward_qat(self, x: np.ndarray) -> Tensor:
        if not self.quantized:
            raise ValueError("model has no quantization params attached; calibrate first")
        a = fake_quant(Tensor(x), self.in_scale, self.in_zero, self.in_bits)
        scale, zero, bits = float(self.in_scale.data), float(self.in_zero.data), self.in_bits
        for layer in self.layers:
            a = layer_forward_qat(a, layer, scale, zero, bits)
            scale, zero, bits = (
                float(layer.a_scale.data),
                float(layer.a_zero.data),
                layer.a_bits,
            )
        return a

    def weight_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def scale_parameters(self) -> list[Tensor]:
        if not self.quantized:
            return []
        out = [self.in_scale]
        for layer in self.layers:
            out.extend([layer.w_scale, layer.a_scale])
        return out

    def zero_parameters(self) -> list[Tensor]:
        if not self.quantized:
            return []
        out = [self.in_zero]
        for layer in self.layers:
            out.append(layer.a_zero)
        return out


def desk_cnn_specs(activation: Activation | None = None) -> list[LayerSpec]:
    """The bundled 5-layer CNN (3 conv + 2 linear) for 1x32x32 inputs."""
    g = activation or Activation(LEAKY_RELU)
    return [
        LayerSpec("conv2d", 1, 16, kernel=3, padding=1, pool=2, activation=g),
        LayerSpec("conv2d", 16, 32, kernel=3, padding=1, pool=2, activation=g),
        LayerSpec("conv2d", 32, 64, kernel=3, padding=1, pool=2, activation=g),
        LayerSpec("linear", 64 * 4 * 4, 128, activation=g),
        LayerSpec("linear", 128, 10, activation=Activation(IDENTITY)),
    ]


def tiny_cnn_specs(activation: Activation | None = None) -> list[LayerSpec]:
    """A minimal conv+linear stack for fast pipeline smoke runs."""
    g = activation or Activation(RELU)
    return [
        LayerSpec("conv2d", 1, 4, kernel=3, padding=1, pool=4, activation=g),
        LayerSpec("linear", 4 * 8 * 8, 10, activation=Activation(IDENTITY)),
    ]


def init_weights(spec: LayerSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """He-style fan-in initialization."""
    shape = spec.weight_shape()
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=shape).astype(np.float32)
    b = np.zeros(shape[0], dtype=np.float32)
    return w, b


def build_model(specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int) -> Model:
    rng = np.random.default_rng(seed)
    layers = [QuantLayer(s, *init_weights(s, rng)) for s in specs]
    return Model(layers, input_shape)
