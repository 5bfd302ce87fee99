"""A small tape-free reverse-mode autodiff over numpy float64 arrays.

Each operation on :class:`Tensor` returns a new node that remembers its
parents and a closure that pushes the upstream gradient back to them.
``Tensor.backward`` walks the graph in reverse topological order.

Only the operations needed by the encoder/classifier and the alignment
losses are provided. Non-differentiable points use fixed subgradients:
``relu`` and ``clamp_min`` pass no gradient at the kink, Euclidean norms
pass zero gradient at zero distance, and ``min`` routes the gradient to the
first minimizing index.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ValidityError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that optionally tracks gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000  # so ndarray <op> Tensor dispatches to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise ValidityError(f"{what} contains non-finite values")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        out_data = self.data**p

        def bw(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._make(out_data, (self,), bw)

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shape mismatch {self.shape} @ {other.shape}")

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw)

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._make(out_data, (self,), bw)

    def reshape(self, *shape) -> "Tensor":
        orig = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,),
                            lambda g: self._accumulate(g.reshape(orig)))

    # -- unary functions -------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: self._accumulate(g * mask))

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: self._accumulate(g * out_data))

    def log(self) -> "Tensor":
        return Tensor._make(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def clamp_min(self, lo: float) -> "Tensor":
        mask = self.data > lo
        out_data = np.where(mask, self.data, lo)
        return Tensor._make(out_data, (self,), lambda g: self._accumulate(g * mask))

    # -- reductions ------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def min(self, axis: int) -> "Tensor":
        idx = np.expand_dims(np.argmin(self.data, axis=axis), axis)
        out_data = np.take_along_axis(self.data, idx, axis=axis).squeeze(axis)

        def bw(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            self._accumulate(full)

        return Tensor._make(out_data, (self,), bw)

    def norm(self) -> "Tensor":
        """Euclidean norm of the whole tensor; zero subgradient at the origin."""
        n = float(np.sqrt(np.sum(self.data * self.data)))

        def bw(g):
            if n > 0.0:
                self._accumulate(g * self.data / n)

        return Tensor._make(np.asarray(n), (self,), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            self._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        return Tensor._make(s, (self,), bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pairwise_dist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of Euclidean distances ``D[i, j] = ||a_i - b_j||``.

    Passing the same tensor twice is allowed; both gradient paths accumulate.
    Pairs at zero distance receive zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_dist needs (m,d) and (n,d), got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0.0, g / dist, 0.0)
        wd = w[:, :, None] * diff
        if a.requires_grad:
            a._accumulate(wd.sum(axis=1))
        if b.requires_grad:
            b._accumulate(-wd.sum(axis=0))

    return Tensor._make(dist, (a, b), bw)
