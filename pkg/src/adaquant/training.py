"""Float pretraining and the quantization-aware retraining loop.

One QAT step runs the fake-quant forward, backpropagates the task loss, and
applies SGD with momentum to weights, biases, and every learned scale and
zero-point (zero-points only when shifting is enabled). Scales are floored
after each update so normalization never divides by zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward
from .data import batches
from .layers import Model, cross_entropy
from .quant import SCALE_FLOOR, fast_reductions

DIVERGENCE_FACTOR = 10.0


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    bits: int = 4
    first_last_bits: int = 8
    shift_enabled: bool = True
    seed: int = 0
    # Scale grads of quantization parameters by 1/sqrt(#elements feeding the
    # reduction); False gives the unscaled plain-sum update.
    qparam_lr_scaled: bool = True
    cosine_decay: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if not self.cosine_decay or self.epochs <= 1:
            return self.lr
        lo = self.lr / 100.0
        t = epoch / max(self.epochs - 1, 1)
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with momentum; weight decay applies to weights only."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr
        self._velocity: dict[int, np.ndarray] = {}

    def _update(self, p: Tensor, grad: np.ndarray, weight_decay: float) -> None:
        if weight_decay:
            grad = grad + np.float32(weight_decay) * p.data
        v = self._velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = np.float32(self.config.momentum) * v + grad
        self._velocity[id(p)] = v
        p.data = (p.data - np.float32(self.lr) * v).astype(np.float32)

    def step_weights(self, params: list[Tensor]) -> None:
        for p in params:
            if p.grad is not None:
                self._update(p, p.grad, self.config.weight_decay)

    def step_qparams(
        self, scales: list[Tensor], zeros: list[Tensor], counts: dict[int, int]
    ) -> None:
        for p in scales + zeros:
            if p.grad is None:
                continue
            g = p.grad
            if self.config.qparam_lr_scaled:
                g = g / np.float32(math.sqrt(counts.get(id(p), 1)))
            self._update(p, g, 0.0)
        for p in scales:
            p.data = np.maximum(p.data, np.float32(SCALE_FLOOR))


def _reduction_counts(model: Model, batch_n: int) -> dict[int, int]:
    """Elements feeding each scale/zero gradient sum, for the scaled-lr mode."""
    counts: dict[int, int] = {}
    if not model.quantized:
        return counts
    shape = (batch_n, *model.input_shape)
    counts[id(model.in_scale)] = counts[id(model.in_zero)] = int(np.prod(shape))
    c, h, w = (model.input_shape + (1, 1))[:3] if len(model.input_shape) == 1 else model.input_shape
    for layer in model.layers:
        spec = layer.spec
        counts[id(layer.w_scale)] = layer.weight.size
        if spec.kind == "conv2d":
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.out_channels
            if spec.pool > 1:
                h //= spec.pool
                w //= spec.pool
            n_act = batch_n * c * h * w
        else:
            n_act = batch_n * spec.out_channels
        counts[id(layer.a_scale)] = counts[id(layer.a_zero)] = n_act
    return counts


def _diagnostics(model: Model) -> str:
    if not model.quantized:
        return "float stage"
    lines = [
        f"layer{i}: f_w={float(l.w_scale.data):.6g} f_a={float(l.a_scale.data):.6g} "
        f"z_a={float(l.a_zero.data):.6g}"
        for i, l in enumerate(model.layers)
    ]
    return "; ".join(lines)


def qat_step(
    model: Model, x: np.ndarray, y: np.ndarray, config: TrainConfig, opt: SGD
) -> float:
    with fast_reductions():
        logits = model.forward_qat(x)
        loss = cross_entropy(logits, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value}; {_diagnostics(model)}")
        backward(loss)
    opt.step_weights(model.weight_parameters())
    zeros = model.zero_parameters() if (config.shift_enabled and model.shift_enabled) else []
    opt.step_qparams(model.scale_parameters(), zeros, _reduction_counts(model, x.shape[0]))
    return value


def float_step(model: Model, x: np.ndarray, y: np.ndarray, opt: SGD) -> float:
    logits = model.forward_float(x)
    loss = cross_entropy(logits, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}; {_diagnostics(model)}")
    backward(loss)
    opt.step_weights(model.weight_parameters())
    return value


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256, mode: str = "float") -> float:
    """Top-1 accuracy of the float or fake-quant forward path."""
    correct = 0
    with Tensor.no_grad():
        for bx, by in batches(x, y, batch_size):
            logits = model.forward_qat(bx) if mode == "qat" else model.forward_float(bx)
            correct += int((logits.data.argmax(axis=1) == by).sum())
    return correct / len(y)


@dataclass
class History:
    """Per-epoch training record, deterministic given config and data."""

    epochs: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    qparams: list[dict[str, float]] = field(default_factory=list)


def _qparam_snapshot(model: Model) -> dict[str, float]:
    if not model.quantized:
        return {}
    snap = {
        "input.f": float(model.in_scale.data),
        "input.z": float(model.in_zero.data),
    }
    for i, layer in enumerate(model.layers):
        snap[f"layer{i}.f_w"] = float(layer.w_scale.data)
        snap[f"layer{i}.f_a"] = float(layer.a_scale.data)
        snap[f"layer{i}.z_a"] = float(layer.a_zero.data)
    return snap


def _train(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    config: TrainConfig,
    qat: bool,
) -> History:
    rng = np.random.default_rng(config.seed)
    opt = SGD(config)
    history = History()
    mode = "qat" if qat else "float"
    initial_loss: float | None = None
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        losses = []
        for bx, by in batches(train_x, train_y, config.batch_size, rng):
            if qat:
                losses.append(qat_step(model, bx, by, config, opt))
            else:
                losses.append(float_step(model, bx, by, opt))
        epoch_loss = float(np.mean(losses))
        if initial_loss is None:
            initial_loss = epoch_loss
        elif epoch_loss > DIVERGENCE_FACTOR * initial_loss:
            raise TrainingError(
                f"divergence: epoch {epoch} loss {epoch_loss:.4g} exceeds "
                f"{DIVERGENCE_FACTOR}x initial {initial_loss:.4g}; {_diagnostics(model)}"
            )
        history.epochs.append(epoch)
        history.lr.append(opt.lr)
        history.train_loss.append(epoch_loss)
        history.eval_accuracy.append(evaluate(model, eval_x, eval_y, mode=mode))
        history.qparams.append(_qparam_snapshot(model))
    return history


def train_float(model, train_x, train_y, eval_x, eval_y, config: TrainConfig) -> History:
    return _train(model, train_x, train_y, eval_x, eval_y, config, qat=False)


def qat_train(model, train_x, train_y, eval_x, eval_y, config: TrainConfig) -> History:
    """Retrain a calibrated model on the fake-quant path.

    Records per-epoch train loss, eval accuracy, and every layer's (f, z)
    trajectory. Aborts with a report if the loss diverges.
    """
    if not model.quantized:
        raise TrainingError("qat_train needs a calibrated model")
    return _train(model, train_x, train_y, eval_x, eval_y, config, qat=True)
