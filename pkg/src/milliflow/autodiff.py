"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient and a backward closure.
Calling backward() on a scalar (or with an explicit seed gradient) walks the
tape in reverse topological order.  Broadcasting is supported everywhere by
summing gradients back over broadcast axes.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._parents = ()

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=grad.dtype)
        self.grad += grad

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape).copy()

        # iterative post-order topological sort
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # ------------------------------------------------------------------
    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, np.negative(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powr(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powr(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b):
    """Tensor-ify both operands; bare float scalars adopt the tensor's dtype.

    Without this, wrapping a python scalar yields a float64 0-d array that
    silently promotes float32 graphs to float64.
    """
    ref = a if isinstance(a, Tensor) else (b if isinstance(b, Tensor) else None)

    def conv(x):
        if isinstance(x, Tensor):
            return x
        arr = np.asarray(x)
        if (
            ref is not None
            and arr.ndim == 0
            and np.issubdtype(arr.dtype, np.floating)
            and np.issubdtype(ref.dtype, np.floating)
            and arr.dtype != ref.dtype
        ):
            arr = arr.astype(ref.dtype)
        return Tensor(arr)

    return conv(a), conv(b)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def powr(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data**p

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * p * a.data ** (p - 1.0))

    out = _make(out_data, (a,), backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def linear(x, w, b) -> Tensor:
    """Fused x @ w + b over the last axis; one GEMM in each direction."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    out_data = np.matmul(x.data, w.data) + b.data

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T))
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            w._accumulate(x2.T @ g2)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out = _make(out_data, (x, w, b), backward)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    out = _make(out_data, (a,), backward)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data)

    out = _make(out_data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out_data * out_data))

    out = _make(out_data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # exp overflow for very negative inputs saturates to exactly 0, which is
    # the correct limit; suppress the warning rather than branch
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), backward)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; exact ties share the gradient equally."""
    a = _as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        expanded = out_data
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
            expanded = np.expand_dims(out_data, axis)
        mask = a.data == expanded
        counts = mask.sum(axis=axis if axis is not None else None, keepdims=True)
        if a.requires_grad:
            share = (mask / counts).astype(a.dtype)
            a._accumulate(np.broadcast_to(g, a.shape) * share)

    out = _make(out_data, (a,), backward)
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = _coerce_pair(a, b)
    out_data = np.maximum(a.data, b.data)

    def backward():
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def minimum(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = np.minimum(a.data, b.data)

    def backward():
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def backward():
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a._accumulate(np.transpose(out.grad, inv))

    out = _make(out_data, (a,), backward)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out_data.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(sl)])

    out = _make(out_data, tuple(tensors), backward)
    return out


def take(a, idx) -> Tensor:
    """Indexing/gather; scatter-adds the gradient back with np.add.at."""
    a = _as_tensor(a)
    out_data = a.data[idx]

    def backward():
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, out.grad)
            a._accumulate(full)

    out = _make(out_data, (a,), backward)
    return out


def softmax(a, axis=-1) -> Tensor:
    """Softmax along `axis`; strictly positive, rows sum to one."""
    a = _as_tensor(a)
    shifted = add(a, Tensor(-a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return mul(e, powr(tsum(e, axis=axis, keepdims=True), -1.0))


def norm(a, axis=-1, keepdims=False, eps: float = 1e-12) -> Tensor:
    """Euclidean norm with an epsilon guard to stay differentiable at 0."""
    return powr(add(tsum(mul(a, a), axis=axis, keepdims=keepdims), eps), 0.5)
