"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor` wrapping a contiguous ``numpy`` float64
array.  Operations build a dynamic graph of parent links and backward
closures; :func:`backward` walks the graph once in reverse topological
order, accumulates gradients additively across fan-out, and then frees
the graph structure.

Broadcasting is deliberately restricted: operands must have equal rank,
and a mismatched axis is legal only where one side has extent 1.  That
is all the architecture needs, and it keeps gradient reduction rules
trivial to audit.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul_elementwise",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "softmax_channel",
    "concat_channels",
    "slice_channels",
    "tsum",
    "tmean",
    "pow_const",
    "reshape",
    "backward",
    "finite_difference_grad",
    "zero_grads",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph construction on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array participating in a differentiation graph.

    Attributes:
        data: the value, always a float64 ndarray.
        grad: gradient buffer of identical shape, or None before backward.
        requires_grad: whether gradients should be accumulated here.
        op: name of the operation that produced this tensor ("leaf" for
            inputs and parameters); useful for graph introspection.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A leaf view of the same data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are promoted to rank-matched extent-1 tensors.
    def __add__(self, other):
        return add(self, _coerce(other, self.ndim))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.ndim))

    def __rsub__(self, other):
        return sub(_coerce(other, self.ndim), self)

    def __mul__(self, other):
        return mul_elementwise(self, _coerce(other, self.ndim))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.ndim))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.ndim), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, float(p))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _coerce(x, ndim: int) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape((1,) * ndim)
    return Tensor(arr)


def _check_same_rank_broadcast(a: Tensor, b: Tensor) -> None:
    if a.ndim != b.ndim:
        raise DimensionError(f"rank mismatch: {a.shape} vs {b.shape}")
    for xa, xb in zip(a.shape, b.shape):
        if xa != xb and xa != 1 and xb != 1:
            raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the gradient over axes that were broadcast from extent 1."""
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # own the buffer on first write: `g` may alias a child's grad
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_rank_broadcast(a, b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_rank_broadcast(a, b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, "sub", (a, b), bwd)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_same_rank_broadcast(a, b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_rank_broadcast(a, b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, "neg", (a,), bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is defined as 0."""
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.where(mask, g, 0.0))

    return _make(out_data, "relu", (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """1 / (1 + exp(-x)), branch-stabilized so large |x| never overflows."""
    out_data = _stable_sigmoid(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (x,), bwd)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax_channel(x: Tensor) -> Tensor:
    """Per-voxel distribution across channels of a 5-D activation.

    Shift-invariant: the channel max is subtracted before exponentiation.
    """
    if x.ndim != 5:
        raise DimensionError(f"softmax_channel expects a 5-D tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            _accum(x, out_data * (g - dot))

    return _make(out_data, "softmax_channel", (x,), bwd)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_channels needs at least one part")
    ref = parts[0]
    for p in parts[1:]:
        if p.ndim != ref.ndim or p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise DimensionError(
                f"concat parts must agree outside the channel axis: {ref.shape} vs {p.shape}"
            )
    out_data = np.concatenate([p.data for p in parts], axis=1)
    extents = [p.shape[1] for p in parts]

    def bwd(g):
        start = 0
        for p, c in zip(parts, extents):
            if p.requires_grad:
                _accum(p, g[:, start : start + c])
            start += c

    return _make(out_data, "concat", tuple(parts), bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel slice x[:, start:stop]; inverse of concat."""
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    out_data = x.data[:, start:stop].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _accum(x, full)

    return _make(out_data, "slice", (x,), bwd)


def tsum(x: Tensor, axes: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        if axes is None:
            _accum(x, np.broadcast_to(g, x.shape))
        elif keepdims:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            expanded = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(expanded, x.shape))

    return _make(out_data, "sum", (x,), bwd)


def tmean(x: Tensor, axes: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    if axes is None:
        n = x.size
    else:
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    s = tsum(x, axes=axes, keepdims=keepdims)
    return s * (1.0 / n)


def pow_const(x: Tensor, p: float) -> Tensor:
    out_data = np.power(x.data, p)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * p * np.power(x.data, p - 1.0))

    return _make(out_data, "pow", (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _make(out_data, "reshape", (x,), bwd)


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor reachable from `loss` that requires it.

    The loss must be scalar (every extent 1).  Gradients accumulate
    additively where a tensor feeds several consumers.  The graph edges
    are released afterwards; parameter gradients survive until cleared.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, per element.

    The function is re-evaluated 2N times on perturbed copies of `x`;
    it must be deterministic for the estimate to mean anything.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        if isinstance(out, Tensor):
            return out.item()
        return float(out)

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate(base)
        flat[i] = orig - eps
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
