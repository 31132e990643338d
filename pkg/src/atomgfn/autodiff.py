"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations the policy and losses need are implemented. Each op
records its parents and a closure that pushes the output gradient back;
:meth:`Tensor.backward` walks the graph in reverse topological order.
Under :func:`no_grad` nothing is recorded, which keeps sampling cheap.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray + Tensor defer to Tensor.__radd__

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- plumbing -------------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        out = Tensor(data, dtype=data.dtype)
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other) -> Tensor:
        o = as_tensor(other, self.data.dtype)
        return Tensor._result(self.data + o.data, (self, o),
                              lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)))

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        o = as_tensor(other, self.data.dtype)
        return Tensor._result(self.data - o.data, (self, o),
                              lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other, self.data.dtype) - self

    def __mul__(self, other) -> Tensor:
        o = as_tensor(other, self.data.dtype)
        return Tensor._result(self.data * o.data, (self, o),
                              lambda g: (_unbroadcast(g * o.data, self.shape),
                                         _unbroadcast(g * self.data, o.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        o = as_tensor(other, self.data.dtype)
        return Tensor._result(self.data / o.data, (self, o),
                              lambda g: (_unbroadcast(g / o.data, self.shape),
                                         _unbroadcast(-g * self.data / o.data ** 2, o.shape)))

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other, self.data.dtype) / self

    def __pow__(self, p: float) -> Tensor:
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        return Tensor._result(self.data ** p, (self,),
                              lambda g: (g * p * self.data ** (p - 1),))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        return Tensor._result(np.log(self.data), (self,), lambda g: (g / self.data,))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1 - out * out),))

    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    def leaky_relu(self, slope: float = 0.01) -> Tensor:
        scale = np.where(self.data > 0, 1.0, slope).astype(self.data.dtype)
        return Tensor._result(self.data * scale, (self,), lambda g: (g * scale,))

    def sigmoid(self) -> Tensor:
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._result(out, (self,), lambda g: (g * out * (1 - out),))

    def square(self) -> Tensor:
        return Tensor._result(self.data * self.data, (self,), lambda g: (2 * g * self.data,))

    # -- reductions and shape ---------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)
        return Tensor._result(np.asarray(out), (self,), back)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        old = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self) -> Tensor:
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,))

    def __matmul__(self, other) -> Tensor:
        o = as_tensor(other, self.data.dtype)
        return Tensor._result(self.data @ o.data, (self, o),
                              lambda g: (g @ o.data.T, self.data.T @ g))

    def __getitem__(self, idx) -> Tensor:
        """Basic slicing or integer-array gathering (rows, or ``(rows, cols)``)."""
        out = self.data[idx]

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)
        return Tensor._result(np.asarray(out), (self,), back)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))
    return Tensor._result(out, tensors, back)


def segment_sum(x: Tensor, ids: np.ndarray, n: int) -> Tensor:
    """``out[s] = sum of x[i] over i with ids[i] == s`` along axis 0."""
    ids = np.asarray(ids, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, ids, x.data)
    return Tensor._result(out, (x,), lambda g: (g[ids],))


def segment_max(x: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Per-segment maximum as a constant (used only for numerical shifts)."""
    out = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(out, ids, x)
    return out


def segment_logsumexp(x: Tensor, ids: np.ndarray, n: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    m = segment_max(x.data, ids, n)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = (x - m[ids]).exp()
    return segment_sum(shifted, ids, n).log() + m


def segment_log_softmax(x: Tensor, ids: np.ndarray, n: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    return x - segment_logsumexp(x, ids, n)[ids]


def segment_softmax(x: Tensor, ids: np.ndarray, n: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    m = segment_max(x.data, ids, n)
    e = (x - m[ids]).exp()
    return e / segment_sum(e, ids, n)[ids]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = xc.square().mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * gain + bias


def grad_norm(tensors: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                             for t in tensors if t.grad is not None)))
