# Minimal reverse-mode autodiff over dense float32 numpy arrays.
# Only the ops needed for small quantized CNNs are implemented; no general
# broadcasting, no views with nonstandard strides (row-major storage keeps
# the integer engine's bit-exactness auditable).
from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible, with a dimension report."""


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float32 array plus a tape node for reverse-mode differentiation.

    Tensors are immutable once created by an op; only leaf parameters are
    updated in place by the optimizer, between tape lifetimes. One tape is
    single-threaded; independent tapes may run concurrently.
    """

    _no_grad = False

    class no_grad:
        def __enter__(self):
            self._prev, Tensor._no_grad = Tensor._no_grad, True

        def __exit__(self, *exc):
            Tensor._no_grad = self._prev

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and not Tensor._no_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad = self.grad + g.astype(np.float32, copy=False)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if not Tensor._no_grad and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if self.shape != other.shape:
            raise ShapeMismatch(f"add: {self.shape} vs {other.shape}")

        def bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor._make(self.data + other.data, (self, other), bw)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self + (-other)

    def __neg__(self) -> "Tensor":
        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._make(-self.data, (self,), bw)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            c = np.float32(other)

            def bw_scalar(g):
                if self.requires_grad:
                    self._accumulate(g * c)

            return Tensor._make(self.data * c, (self,), bw_scalar)

        if self.shape != other.shape:
            raise ShapeMismatch(f"mul: {self.shape} vs {other.shape}")
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def reshape(self, *shape) -> "Tensor":
        old = self.data.shape

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return Tensor._make(self.data.reshape(*shape), (self,), bw)

    def sum(self) -> "Tensor":
        def bw(g):
            if self.requires_grad:
                self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor._make(self.data.sum(dtype=np.float32), (self,), bw)

    def mean(self) -> "Tensor":
        inv = np.float32(1.0 / self.data.size)

        def bw(g):
            if self.requires_grad:
                self._accumulate(np.broadcast_to(g * inv, self.data.shape))

        return Tensor._make(
            (self.data.sum(dtype=np.float32) * inv).astype(np.float32), (self,), bw
        )

    # -- activations -------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor._make(np.maximum(self.data, 0), (self,), bw)

    def leaky_relu(self, alpha: float) -> "Tensor":
        a = np.float32(alpha)
        mask = self.data > 0

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * np.where(mask, np.float32(1.0), a))

        return Tensor._make(np.where(mask, self.data, a * self.data), (self,), bw)

    def swish(self) -> "Tensor":
        sig = _sigmoid(self.data)

        def bw(g):
            if self.requires_grad:
                # d/dx x*sigma(x) = sigma + x*sigma*(1-sigma)
                self._accumulate(g * (sig + self.data * sig * (1 - sig)))

        return Tensor._make(self.data * sig, (self,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; the tape is acyclic and each node is visited once.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Run reverse-mode AD from a scalar loss.

    Returns a map from every reachable leaf with requires_grad to its
    gradient, accumulated over all use sites. Also populates `.grad`.
    """
    for node in _toposort(loss):
        node.grad = None
    loss.backward()
    grads: dict[Tensor, Tensor] = {}
    for node in _toposort(loss):
        if node.requires_grad and node._backward is None:
            g = node.grad if node.grad is not None else np.zeros_like(node.data)
            grads[node] = Tensor(g)
    return grads


# -- custom gradients --------------------------------------------------------

_CUSTOM_RULES: dict[str, object] = {}


def register_custom_grad(op_id: str, rule) -> None:
    """Attach a backward rule to an op id.

    `rule(upstream, ctx)` must return one gradient array (or None) per input
    passed to `custom_op`. Duplicate registration is rejected.
    """
    if op_id in _CUSTOM_RULES:
        raise ValueError(f"backward rule already registered for op {op_id!r}")
    _CUSTOM_RULES[op_id] = rule


def unregister_custom_grad(op_id: str) -> None:
    _CUSTOM_RULES.pop(op_id, None)


def custom_op(op_id: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], ctx: dict) -> Tensor:
    """Record `out_data` as produced by `op_id` from `inputs`.

    The rule registered for `op_id` at call time is bound onto the tape; an
    op with no rule propagates zero gradient.
    """
    rule = _CUSTOM_RULES.get(op_id)

    def bw(g):
        if rule is None:
            return
        grads = rule(g, ctx)
        for t, gr in zip(inputs, grads):
            if gr is not None and t.requires_grad:
                t._accumulate(np.asarray(gr, dtype=np.float32).reshape(t.data.shape))

    return Tensor._make(_as_f32(out_data), tuple(inputs), bw)


# -- layer primitives --------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dc[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_value: float = 0.0,
) -> Tensor:
    """2-D cross-correlation, NCHW input and KCkhkw weight, per-channel bias.

    `pad_value` is the constant used for padding (real zero for float models,
    the quantization grid point nearest zero on the fake-quant path).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatch(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeMismatch(f"conv2d: input channels {c} != weight channels {cw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(
            f"conv2d: kernel ({kh},{kw}) too large for input ({h},{w}) with padding {padding}"
        )
    if bias is not None and bias.shape != (k,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({k},)")

    if padding:
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=np.float32(pad_value),
        )
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # [N, C*kh*kw, OH*OW]
    wm = weight.data.reshape(k, -1)
    out = np.matmul(wm, cols)  # [N, K, OH*OW]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, k, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.reshape(n, k, oh * ow)
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wm.T[None], gm)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, oh, ow)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(dxp)

    return Tensor._make(out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x [N,I] times weight [O,I] transposed, plus bias [O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeMismatch(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    n, fin = x.shape
    fout, fin_w = weight.shape
    if fin != fin_w:
        raise ShapeMismatch(f"linear: input features {fin} != weight features {fin_w}")
    if bias is not None and bias.shape != (fout,):
        raise ShapeMismatch(f"linear: bias shape {bias.shape} != ({fout},)")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return Tensor._make(out, parents, bw)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k-by-k max pooling; spatial dims must divide by k.

    Ties (common on quantized maps) share the gradient equally, a valid and
    deterministic subgradient choice.
    """
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"max_pool2d: spatial dims ({h},{w}) not divisible by {k}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(n, c, oh, k, ow, k)
    out = windows.max(axis=(3, 5))

    def bw(g):
        if not x.requires_grad:
            return
        mask = windows == out[:, :, :, None, :, None]
        counts = mask.sum(axis=(3, 5), dtype=np.float32)[:, :, :, None, :, None]
        dx = mask * (g[:, :, :, None, :, None] / counts)
        x._accumulate(dx.reshape(n, c, h, w))

    return Tensor._make(out, (x,), bw)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeMismatch(f"avg_pool2d: spatial dims ({h},{w}) not divisible by {k}")
    oh, ow = h // k, w // k
    inv = np.float32(1.0 / (k * k))
    out = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5), dtype=np.float32)

    def bw(g):
        if x.requires_grad:
            dx = np.broadcast_to(
                (g * inv)[:, :, :, None, :, None], (n, c, oh, k, ow, k)
            ).reshape(n, c, h, w)
            x._accumulate(dx)

    return Tensor._make(out, (x,), bw)
