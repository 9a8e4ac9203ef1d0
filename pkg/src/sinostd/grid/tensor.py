"""Dense float tensors with eager, tape-based reverse-mode differentiation.

Storage is 32-bit by default; reductions accumulate in 64 bits. Gradient
checking runs the same graph in float64 (see gradcheck.py), so ops never
hard-cast their inputs.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

MAX_RANK = 4

# Every op validates its output unless this is switched off (hot loops may
# disable it once a model is known to be numerically sound).
FINITE_CHECKS = True


class GridError(ValueError):
    """Shape mismatch, invalid argument, or non-finite value in an op."""


def set_finite_checks(enabled: bool) -> bool:
    global FINITE_CHECKS
    previous = FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)
    return previous


def _coerce(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        arr = np.asarray(data, dtype=dtype)
    elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        arr = data
    else:
        arr = np.asarray(data, dtype=np.float32)
    if arr.ndim > MAX_RANK:
        raise GridError(f"tensor rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return arr


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise GridError(f"non-finite values produced by '{opname}'")


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(np.result_type(np.float32, grad.dtype), copy=False).reshape(shape)


class Tensor:
    """A node in the computation tape wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _coerce(data, dtype)
        _check_finite(self.data, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward, opname: str) -> "Tensor":
        _check_finite(data, opname)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.name = None
        if out.data.ndim > MAX_RANK:
            raise GridError(f"'{opname}' produced rank {out.data.ndim} > {MAX_RANK}")
        return out

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{tag})"

    # -- autograd --------------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad.astype(self.data.dtype, copy=False)

    def backward(self, grad=None) -> None:
        """Reverse sweep from this node, accumulating into .grad of leaves."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise GridError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ------------------------------------------------

    @staticmethod
    def _lift(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype), requires_grad=False)

    def __add__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(g, b.data.shape))

        return Tensor._from_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(-g, b.data.shape))

        return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return Tensor._lift(other, self.data.dtype) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(g * a.data, b.data.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return Tensor._lift(other, self.data.dtype) / self

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), backward, "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise GridError("only scalar exponents are supported")
        a, p = self, float(exponent)

        def backward(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(a.data ** p, (a,), backward, "pow")

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._from_op(out_data, (a,), backward, "exp")

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._from_op(np.log(a.data), (a,), backward, "log")

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g / (2.0 * out_data))

        return Tensor._from_op(out_data, (a,), backward, "sqrt")

    def abs(self):
        a = self

        def backward(g):
            a._accumulate(g * np.sign(a.data))

        return Tensor._from_op(np.abs(a.data), (a,), backward, "abs")

    def clip(self, lo: float, hi: float):
        a = self
        mask = (a.data > lo) & (a.data < hi)

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._from_op(np.clip(a.data, lo, hi), (a,), backward, "clip")

    # -- reductions (64-bit accumulation) -----------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out_data = np.asarray(out_data, dtype=a.data.dtype)

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape))

        return Tensor._from_op(out_data, (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._from_op(out_data, (a,), backward, "reshape")

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice along one axis."""
        a = self
        if not (0 <= start and start + length <= a.data.shape[axis]):
            raise GridError(f"narrow out of range: axis {axis}, start {start}, length {length}, "
                            f"extent {a.data.shape[axis]}")
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out_data = np.ascontiguousarray(a.data[index])

        def backward(g):
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

        return Tensor._from_op(out_data, (a,), backward, "narrow")


def cat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    """Concatenate along an axis, splitting the gradient back on the way down."""
    tensors = list(tensors)
    if not tensors:
        raise GridError("cat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, extents):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                t._accumulate(np.ascontiguousarray(g[tuple(index)]))
            offset += n

    return Tensor._from_op(data, tensors, backward, "cat")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
