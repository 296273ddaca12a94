"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every operation builds a node in an implicit computation graph (the tape);
calling :func:`backward` on a scalar output walks the graph in reverse
topological order and accumulates gradients into each differentiable leaf.
Values are immutable once produced; all math is 64-bit.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "grad",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "mean_rows",
    "sum_rows",
    "concat",
    "finite_diff_check",
]


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] = lambda: None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...],
              backward: Callable[["Tensor"], None]) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._backward = lambda: backward(out)
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)

        def back(out):
            self._accum(_unbroadcast(out.grad, self.shape))
            other._accum(_unbroadcast(out.grad, other.shape))

        return self._make(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)

        def back(out):
            self._accum(_unbroadcast(out.grad, self.shape))
            other._accum(_unbroadcast(-out.grad, other.shape))

        return self._make(self.data - other.data, (self, other), back)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        def back(out):
            self._accum(-out.grad)

        return self._make(-self.data, (self,), back)

    def __mul__(self, other):
        other = _as_tensor(other)

        def back(out):
            self._accum(_unbroadcast(out.grad * other.data, self.shape))
            other._accum(_unbroadcast(out.grad * self.data, other.shape))

        return self._make(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)

        def back(out):
            self._accum(_unbroadcast(out.grad / other.data, self.shape))
            other._accum(_unbroadcast(-out.grad * self.data / other.data ** 2,
                                      other.shape))

        return self._make(self.data / other.data, (self, other), back)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def back(out):
            self._accum(out.grad.reshape(old))

        return self._make(self.data.reshape(shape), (self,), back)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def back(out):
            self._accum(out.grad.transpose(inv))

        return self._make(self.data.transpose(axes), (self,), back)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        def back(out):
            if not self.requires_grad:
                return
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)

        return self._make(self.data[idx], (self,), back)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def back(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return self._make(self.data.sum(axis=axis, keepdims=keepdims),
                          (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities -------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)

        def back(out):
            self._accum(out.grad * (1.0 - y ** 2))

        return self._make(y, (self,), back)

    def exp(self) -> "Tensor":
        y = np.exp(self.data)

        def back(out):
            self._accum(out.grad * y)

        return self._make(y, (self,), back)

    def log(self) -> "Tensor":
        def back(out):
            self._accum(out.grad / self.data)

        return self._make(np.log(self.data), (self,), back)

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def back(out):
            self._accum(out.grad * mask)

        return self._make(self.data * mask, (self,), back)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D and batched 3-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def back(out):
        ga = out.grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ out.grad
        a._accum(_unbroadcast(ga, a.shape))
        b._accum(_unbroadcast(gb, b.shape))

    return a._make(a.data @ b.data, (a, b), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(out):
        g = out.grad
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return a._make(y, (a,), back)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(out):
        g = out.grad
        a._accum(g - p * g.sum(axis=-1, keepdims=True))

    return a._make(y, (a,), back)


_NORM_FLOOR = 1e-12


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; zero rows stay zero."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, _NORM_FLOOR)
    y = a.data / safe

    def back(out):
        g = out.grad
        # d(x/||x||) = (g - y * <g, y>) / ||x||, with the floored norm
        a._accum((g - y * (g * y).sum(axis=-1, keepdims=True)) / safe)

    return a._make(y, (a,), back)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean of a matrix: (m, n) -> (n,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] < 1:
        raise ValueError(f"mean_rows expects a nonempty matrix, got {a.shape}")
    return a.mean(axis=0)


def sum_rows(a: Tensor) -> Tensor:
    """Column-wise sum of a matrix: (m, n) -> (n,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] < 1:
        raise ValueError(f"sum_rows expects a nonempty matrix, got {a.shape}")
    return a.sum(axis=0)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            p._accum(out.grad[tuple(idx)])

    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parts))
    if out.requires_grad:
        out._parents = tuple(parts)
        out._backward = lambda: back(out)
    return out


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output through the recorded graph."""
    if out.data.size != 1:
        raise ValueError(
            f"backward requires a scalar output, got shape {out.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        node._backward()


def grad(out: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar output w.r.t. each input (zeros if unused)."""
    for x in inputs:
        x.grad = None
    backward(out)
    return [x.grad if x.grad is not None else np.zeros_like(x.data)
            for x in inputs]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
                      h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    analytic = grad(out, [xt])[0]

    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + h
        fp = f(Tensor(bump.reshape(x.shape))).item()
        bump[i] = flat[i] - h
        fm = f(Tensor(bump.reshape(x.shape))).item()
        if not np.isfinite(fp) or not np.isfinite(fm):
            raise FloatingPointError(
                f"non-finite value in finite differences at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
