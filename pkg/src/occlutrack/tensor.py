"""Small dense tensor type with reverse-mode gradients.

Everything is float64. A :class:`Tensor` records the operation that produced
it when any input requires a gradient; :meth:`Tensor.backward` walks that
graph in reverse topological order. Feature maps are rank-3 ``(C, H, W)``
tensors; a leading batch axis is accepted by every op that makes sense.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def pointwise(a, b, op: str) -> Tensor:
    """Elementwise ``add``/``sub`` of equal-shape maps, or ``scale`` by scalar ``b``."""
    if op == "scale":
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, op)
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    raise ValueError(f"unknown pointwise op {op!r}")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def maximum0(a) -> Tensor:
    """``max(a, 0)``; subgradient 0 at the kink."""
    return relu(a)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(items: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in items]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Batched matrix product of rank >= 2 operands (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------- convolution


@dataclass
class ConvLayer:
    """Stride-1, size-preserving convolution (``k`` in {1, 3})."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        self.kernel = as_tensor(self.kernel)
        self.bias = as_tensor(self.bias)
        k = self.kernel.shape
        if len(k) != 4 or k[2] != k[3] or k[2] not in (1, 3):
            raise ShapeError(f"kernel must be (out, in, k, k) with k in {{1, 3}}, got {k}")
        if self.bias.shape != (k[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out-ch {k[0]}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def size(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return self.size // 2

    @property
    def stride(self) -> int:
        return 1

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]

    @classmethod
    def random(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int,
               bias: float = 0.0, gain: float = 1.0) -> "ConvLayer":
        std = gain / np.sqrt(c_in * k * k)
        return cls(
            Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True),
            Tensor(np.full(c_out, float(bias)), requires_grad=True),
        )

    @classmethod
    def identity(cls, channels: int) -> "ConvLayer":
        kern = np.eye(channels).reshape(channels, channels, 1, 1)
        return cls(Tensor(kern, requires_grad=True), Tensor(np.zeros(channels), requires_grad=True))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W, C*k*k) patches for a same-padded conv."""
    if k == 1:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    p = k // 2
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, c, k, k))
    for i in range(k):
        for j in range(k):
            cols[..., i, j] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n, h, w, c * k * k)


def _conv_raw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    o, c, k, _ = kernel.shape
    cols = _im2col(x, k)
    out = cols @ kernel.reshape(o, c * k * k).T
    return out.transpose(0, 3, 1, 2)


def conv2d(x, layer: ConvLayer) -> Tensor:
    """Same-size convolution of a ``(C, H, W)`` or ``(N, C, H, W)`` map."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects rank 3 or 4 input, got shape {x.shape}")
    if x.shape[-3] != layer.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[-3]} channels, layer expects {layer.in_channels}"
        )
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    kd = layer.kernel.data
    o, c, k, _ = kd.shape
    cols = _im2col(xd, k)
    out = (cols @ kd.reshape(o, c * k * k).T).transpose(0, 3, 1, 2) + layer.bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        g_bias = gb.sum(axis=(0, 2, 3))
        gmat = gb.transpose(0, 2, 3, 1).reshape(-1, o)
        g_kernel = (gmat.T @ cols.reshape(-1, c * k * k)).reshape(o, c, k, k)
        g_x = None
        if x.requires_grad:
            flipped = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            g_x = _conv_raw(gb, np.ascontiguousarray(flipped))
            if not batched:
                g_x = g_x[0]
        return g_x, g_kernel, g_bias

    return _make(out, (x, layer.kernel, layer.bias), backward)


# ---------------------------------------------------------------- gradient check


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar loss from the current parameter values each
    call. The error per element is ``|analytic - fd| / max(1, |analytic|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("non-finite loss at probe point")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(fn().data)
            flat[i] = orig - epsilon
            down = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite loss during finite differencing")
            fd = (up - down) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        p.zero_grad()
    return worst
