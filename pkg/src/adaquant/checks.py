"""Self-contained gradient verification suites for the gradcheck command.

Two independent routes guard the backward implementation: scalar-loop
evaluation of the quantizer gradient formulas, and central finite differences
for the smooth ops. Each check returns (name, passed, detail).
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff
from .autodiff import Tensor, backward
from .layers import Activation, LayerSpec, QuantLayer, build_model, cross_entropy
from .quant import SUPPORTED_BITS, fake_quant, qrange


def scalar_quant_grads(
    a: np.ndarray, f: float, z: float, bits: int, upstream: np.ndarray
) -> tuple[np.ndarray, np.float32, np.float32]:
    """Direct per-element evaluation of the quantizer gradient formulas.

    Mirrors the documented precision contract: float32 elementwise factors,
    exact float64 products, correctly rounded sum.
    """
    lo, hi = qrange(bits)
    f32, z32 = np.float32(f), np.float32(z)
    dx = np.empty_like(upstream)
    df_terms = []
    dz_terms = []
    flat_a = a.ravel()
    flat_u = upstream.ravel()
    flat_dx = dx.reshape(-1)
    for i in range(flat_a.size):
        a_bar = np.float32((flat_a[i] - z32) / f32)
        if a_bar > hi:
            a_hat = np.float32(hi)
        elif a_bar <= lo:
            a_hat = np.float32(lo)
        else:
            a_hat = np.float32(math.floor(abs(a_bar) + 0.5) * math.copysign(1.0, a_bar))
        in_range = lo < a_bar < hi
        mask = np.float32(1.0) if in_range else np.float32(0.0)
        u = float(flat_u[i])
        flat_dx[i] = np.float32(flat_u[i] * mask)
        if in_range:
            df_terms.append(u * float(np.float32(a_hat - a_bar)))
            dz_terms.append(0.0)
        else:
            df_terms.append(u * float(a_hat))
            dz_terms.append(u)
    return dx, np.float32(math.fsum(df_terms) + 0.0), np.float32(math.fsum(dz_terms) + 0.0)


def check_quant_gradients(trials: int = 200, seed: int = 0, max_side: int = 64):
    """Tape-produced scale/zero/input grads must equal the scalar-loop oracle bit for bit."""
    rng = np.random.default_rng(seed)
    for t in range(trials):
        bits = int(rng.choice(SUPPORTED_BITS))
        shape = (int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1)))
        f = float(rng.uniform(0.05, 2.0))
        z = float(rng.uniform(-1.0, 1.0))
        span = 2 ** (bits - 1) * f * 1.5  # places a share of values out of range
        a = rng.uniform(z - span, z + span, size=shape).astype(np.float32)
        u = rng.normal(0, 1, size=shape).astype(np.float32)

        x = Tensor(a, requires_grad=True)
        fs = Tensor(np.float32(f), requires_grad=True)
        zs = Tensor(np.float32(z), requires_grad=True)
        loss = (fake_quant(x, fs, zs, bits) * Tensor(u)).sum()
        backward(loss)

        dx, df, dz = scalar_quant_grads(a, f, z, bits, u)
        if not np.array_equal(x.grad, dx):
            return False, f"trial {t}: input grad mismatch"
        if x.grad.tobytes() != dx.tobytes():
            return False, f"trial {t}: input grad not bit-identical"
        if np.float32(fs.grad).tobytes() != df.tobytes():
            return False, f"trial {t}: scale grad {float(fs.grad)!r} != {float(df)!r}"
        if np.float32(zs.grad).tobytes() != dz.tobytes():
            return False, f"trial {t}: zero grad {float(zs.grad)!r} != {float(dz)!r}"
    return True, f"{trials} trials bit-identical"


# A separate double-precision forward implementation drives the finite
# differences, so the oracle has its own evaluation noise floor instead of
# inheriting float32 rounding from the path under test.


def _conv64(x, w, b, stride, padding):
    n, c, h, ww = x.shape
    k, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.empty((n, k, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("ncij,kcij->nk", patch, w)
    return out + b[None, :, None, None]


def _act64(x, act: Activation):
    if act.kind == "swish":
        return x / (1.0 + np.exp(-x))
    if act.kind == "leaky_relu":
        return np.where(x > 0, x, act.alpha * x)
    if act.kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _loss64(params: list[np.ndarray], model, x, y) -> float:
    a = x.astype(np.float64)
    it = iter(params)
    for layer in model.layers:
        w, b = next(it), next(it)
        if layer.spec.kind == "linear":
            if a.ndim > 2:
                a = a.reshape(a.shape[0], -1)
            a = a @ w.T + b[None, :]
        else:
            a = _conv64(a, w, b, layer.spec.stride, layer.spec.padding)
        a = _act64(a, layer.spec.activation)
    shifted = a - a.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(y)), y]))


def _fd_check(model, x, y, h: float = 1e-3, rel_tol: float = 1e-3, abs_floor: float = 1e-5):
    """Central finite differences against tape gradients for every parameter."""
    logits = model.forward_float(x)
    loss = cross_entropy(logits, y)
    backward(loss)
    params = [p.data.astype(np.float64) for p in model.weight_parameters()]
    worst = 0.0
    for pi, p in enumerate(model.weight_parameters()):
        g = p.grad.reshape(-1)
        flat = params[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _loss64(params, model, x, y)
            flat[i] = orig - h
            dn = _loss64(params, model, x, y)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            ad = float(g[i])
            if abs(fd) <= abs_floor and abs(ad) <= abs_floor:
                continue
            rel = abs(fd - ad) / max(abs(fd), abs(ad))
            worst = max(worst, rel)
            if rel > rel_tol:
                return False, f"param grad rel err {rel:.2e} (fd {fd:.5g}, ad {ad:.5g})"
    return True, f"worst relative error {worst:.2e}"


def check_finite_differences(trials: int = 6, seed: int = 0):
    """Smooth-op nets (swish activations) against central differences."""
    rng = np.random.default_rng(seed)
    for t in range(trials):
        if t % 2 == 0:
            specs = [
                LayerSpec("linear", 6, 5, activation=Activation("swish")),
                LayerSpec("linear", 5, 3, activation=Activation("identity")),
            ]
            shape = (6,)
        else:
            specs = [
                LayerSpec("conv2d", 1, 2, kernel=3, padding=1, activation=Activation("swish")),
                LayerSpec("linear", 2 * 6 * 6, 3, activation=Activation("identity")),
            ]
            shape = (1, 6, 6)
        model = build_model(specs, shape, seed=int(rng.integers(1 << 30)))
        for p in model.weight_parameters():
            p.data = (p.data + rng.normal(0, 0.2, p.data.shape)).astype(np.float32)
        x = rng.normal(0, 1, size=(4, *shape)).astype(np.float32)
        y = rng.integers(0, 3, size=4)
        ok, detail = _fd_check(model, x, y)
        if not ok:
            return False, f"trial {t}: {detail}"
    return True, f"{trials} nets within tolerance"


def check_accumulation(seed: int = 0):
    """A parameter used at k sites receives the sum of the per-site gradients."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 1, size=(3, 3)).astype(np.float32), requires_grad=True)
    c1 = Tensor(rng.normal(0, 1, size=(3, 3)).astype(np.float32))
    c2 = Tensor(rng.normal(0, 1, size=(3, 3)).astype(np.float32))
    loss = ((w * c1).sum() + (w * c2).sum() + (w * c1).sum())
    backward(loss)
    combined = w.grad.copy()
    parts = np.zeros_like(combined)
    for c in (c1, c2, c1):
        backward((w * c).sum())
        parts += w.grad
    if not np.allclose(combined, parts, atol=1e-6):
        return False, "multi-site gradient != sum of single-site gradients"
    return True, "3-site accumulation matches"


def check_determinism(seed: int = 0):
    rng = np.random.default_rng(seed)
    specs = [
        LayerSpec("linear", 8, 6, activation=Activation("leaky_relu")),
        LayerSpec("linear", 6, 4, activation=Activation("identity")),
    ]
    x = rng.normal(0, 1, size=(5, 8)).astype(np.float32)
    y = rng.integers(0, 4, size=5)
    grabs = []
    for _ in range(2):
        model = build_model(specs, (8,), seed=7)
        backward(cross_entropy(model.forward_float(x), y))
        grabs.append(np.concatenate([p.grad.ravel() for p in model.weight_parameters()]))
    if grabs[0].tobytes() != grabs[1].tobytes():
        return False, "repeated backward differs bitwise"
    return True, "bit-identical across runs"


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    return [
        ("quant-gradient-oracle", *check_quant_gradients(seed=seed)),
        ("finite-differences", *check_finite_differences(seed=seed)),
        ("gradient-accumulation", *check_accumulation(seed=seed)),
        ("backward-determinism", *check_determinism(seed=seed)),
    ]
