"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a node that records its parents and a closure mapping the
upstream gradient to per-parent gradients. ``backward`` walks the nodes in
reverse creation order, which is a valid topological order because a node can
only reference tensors created before it.

Broadcasting is limited to scalar <-> tensor. Anything wider (bias rows,
per-channel scales) is expressed through explicit ops such as ``matmul`` with a
ones column or ``custom_grad``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An op produced or received non-finite values, or left its domain."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{op}: non-finite values encountered")


class Tensor:
    """Dense float64 array that may participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_array(data)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._order = next(_counter)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _scalar_compatible(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast (scalar only)")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    # t was a broadcast scalar
    return np.full(t.shape, grad.sum())


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _scalar_compatible(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _scalar_compatible(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _scalar_compatible(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D operand, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _node(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(a) -> Tensor:
    a = _wrap(a)
    # derivative at exactly 0 is taken as 0
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("exp: overflow")
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log: argument must be strictly positive")
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _wrap(a)
    shape, n = a.shape, a.size
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def custom_grad(
    inputs: Sequence[Tensor],
    forward_value,
    backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str = "custom",
) -> Tensor:
    """Attach an arbitrary backward rule to a precomputed forward value.

    ``backward_rule`` receives the upstream gradient (shape of ``forward_value``)
    and returns one gradient per input, or ``None`` for inputs it does not
    differentiate. This is how straight-through rounding enters the tape.
    """
    inputs = tuple(_wrap(t) for t in inputs)
    value = _as_array(forward_value.data if isinstance(forward_value, Tensor) else forward_value)

    def rule(g: np.ndarray):
        grads = backward_rule(g)
        if len(grads) != len(inputs):
            raise ContractError(f"{op}: backward rule returned {len(grads)} grads for {len(inputs)} inputs")
        for t, gr in zip(inputs, grads):
            if gr is not None and np.shape(gr) != t.shape:
                raise ContractError(f"{op}: backward rule gave shape {np.shape(gr)} for input {t.shape}")
        return grads

    return _node(value, inputs, rule, op)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so callers reset them
    between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor with requires_grad")

    # collect the reachable subgraph
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg
