"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed autograd. Every op builds a node holding its parents and
a closure that pushes the output gradient back to them; :meth:`Tensor.backward`
orders the reachable nodes topologically and replays the closures in reverse.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a scalar, or one of them is a 1-D vector matching the
other's trailing dimension. Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "tensor",
    "zeros",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "log_softmax",
    "sigmoid",
    "dropout",
    "build_tape",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created leaf tensors."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data}"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        tape = build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, "add")

    def __radd__(self, other):
        return _binary(_lift(other, self), self, "add")

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(_lift(other, self), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    def __rmul__(self, other):
        return _binary(_lift(other, self), self, "mul")

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]
        shape, dt = self.data.shape, self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dt)
            np.add.at(full, idx, g)
            _accum(self, full)

        return Tensor._result(np.array(data), (self,), backward, "getitem")

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return Tensor._result(
            self.data.reshape(shape), (self,), lambda g: _accum(self, g.reshape(src)), "reshape"
        )

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._result(
            self.data.transpose(axes), (self,), lambda g: _accum(self, g.transpose(inv)), "transpose"
        )

    @property
    def T(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        data = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(g, shape))

        return Tensor._result(data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: _accum(self, g * out), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: _accum(self, g / x), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: _accum(self, g * (1.0 - out * out)), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: _accum(self, g * mask), "relu")

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def _lift(value, like: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=like.data.dtype)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = "const"
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else _lift(x, like)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # grads are never mutated in place, so aliasing g is safe
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or a == () or b == ():
        return
    if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
        return
    if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
        return
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


def _binary(a: Tensor, b, op: str) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    x, y = a.data, b.data
    if op == "add":
        data = x + y

        def backward(g):
            _accum(a, _unbroadcast(g, x.shape))
            _accum(b, _unbroadcast(g, y.shape))

    elif op == "sub":
        data = x - y

        def backward(g):
            _accum(a, _unbroadcast(g, x.shape))
            _accum(b, _unbroadcast(-g, y.shape))

    elif op == "mul":
        data = x * y

        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * y, x.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * x, y.shape))

    elif op == "div":
        data = x / y

        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / y, x.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * x / (y * y), y.shape))

    else:  # pragma: no cover
        raise ValueError(op)
    return Tensor._result(data, (a, b), backward, op)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    data = np.matmul(x, y)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(y, -1, -2)))
        if b.requires_grad:
            if y.ndim == 2:
                k, n = y.shape
                _accum(b, x.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, np.matmul(np.swapaxes(x, -1, -2), g))

    return Tensor._result(data, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    data = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % (tensors[0].ndim + 1)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(ax, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=ax)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    out = _softmax_np(x.data, axis)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        _accum(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (x,), backward, "log_softmax")


def _sigmoid_grad(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1.0 - out)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    ez = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(d.dtype)
    return Tensor._result(out, (x,), lambda g: _accum(x, _sigmoid_grad(out, g)), "sigmoid")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when ``training`` is False or ``p`` is 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout rate must be < 1, got {p}")
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._result(x.data * keep, (x,), lambda g: _accum(x, g * keep), "dropout")


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total**0.5
