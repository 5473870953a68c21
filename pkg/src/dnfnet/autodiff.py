"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Only the operations needed by DNF-Net and its FCN baseline are provided.
Every differentiable op records a node holding its inputs and a closure that
maps the output gradient to input gradients.  ``backward`` orders the recorded
nodes into a :class:`Tape` (creation order is already topological) and replays
it in reverse, visiting every node exactly once.

Gradients accumulate into ``Tensor.grad`` across repeated ``backward`` calls;
call :meth:`Tensor.zero_grad` (or :func:`zero_grads`) between steps.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class DimensionError(ContractError):
    """Raised when operand shapes are incompatible."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: whether gradients should be accumulated for this tensor.
        name: optional label used in diagnostics (e.g. NaN-gradient errors).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.flags: set[str] = set()
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._seq = next(_counter)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary elementwise ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient; division by an exact zero yields +-Inf (or NaN for 0/0)
    and tags the output with the ``div_by_zero`` flag instead of raising."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = _make(value, (a, b), backward, "div")
    if np.any(b.data == 0):
        out.flags.add("div_by_zero")
    return out


# ---------------------------------------------------------------------------
# unary elementwise ops
# ---------------------------------------------------------------------------
def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore"):
        y = np.log(x.data)
    return _make(y, (x,), lambda g: (g / x.data,), "log")


def tabs(x) -> Tensor:
    """|x| with subgradient 0 at 0."""
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x) -> Tensor:
    """max(x, 0) with subgradient 0 at 0."""
    x = as_tensor(x)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "abs": tabs,
    "relu": relu,
    "neg": neg,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of the named elementwise ops (``tanh``, ``sigmoid``, ``exp``,
    ``abs``, ``relu``, ``add``, ``sub``, ``mul``, ``div``, ``neg``)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(value), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "getitem")


def take_rows(x, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (repeats allowed); backward scatter-adds."""
    x = as_tensor(x)
    rows = np.asarray(rows)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, rows, g)
        return (out,)

    return _make(x.data[rows], (x,), backward, "take_rows")


def segment_sum(x, offsets: np.ndarray) -> Tensor:
    """Sum contiguous column segments of a 2-D tensor.

    ``offsets`` holds the start column of each segment (strictly increasing,
    starting at 0); the last segment runs to the end.  Output has one column
    per segment.
    """
    x = as_tensor(x)
    offsets = np.asarray(offsets, dtype=np.intp)
    lengths = np.diff(np.append(offsets, x.shape[1]))
    if offsets.size == 0 or offsets[0] != 0 or np.any(lengths <= 0):
        raise ContractError("segment_sum: offsets must start at 0 and be strictly increasing")

    def backward(g):
        return (np.repeat(g, lengths, axis=1),)

    return _make(np.add.reduceat(x.data, offsets, axis=1), (x,), backward, "segment_sum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack_columns(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length as columns of a 2-D tensor."""
    return concat([reshape(t, (-1, 1)) for t in tensors], axis=1)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis`` (1-D input: the whole vector)."""
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("softmax of an empty tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def row_norm(x) -> Tensor:
    """L2 norm along the last axis; subgradient 0 at the zero vector."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norm > 0, g / norm, 0.0)
        return (x.data * scale[..., None],)

    return _make(norm, (x,), backward, "row_norm")


def custom_grad(
    forward_fn: Callable[[np.ndarray], np.ndarray],
    backward_proxy_fn: Callable[[np.ndarray], np.ndarray],
    x,
) -> Tensor:
    """Evaluate ``forward_fn`` exactly; differentiate as if it were the proxy.

    ``backward_proxy_fn`` is the *derivative* of the proxy, evaluated at the
    input.  Both functions act elementwise on numpy arrays.
    """
    x = as_tensor(x)
    value = np.asarray(forward_fn(x.data), dtype=DTYPE)
    local = np.asarray(backward_proxy_fn(x.data), dtype=DTYPE)
    return _make(value, (x,), lambda g: (g * local,), "custom_grad")


# ---------------------------------------------------------------------------
# losses with fused, numerically stable gradients
# ---------------------------------------------------------------------------
def sigmoid_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0,1} labels."""
    logits = as_tensor(logits)
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=DTYPE).reshape(-1)
    if z.shape != y.shape:
        raise DimensionError(f"sigmoid_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    value = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        p = _sigmoid(z)
        return ((g * (p - y) / z.size).reshape(logits.shape),)

    return _make(np.asarray(value), (logits,), backward, "sigmoid_ce")


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=np.intp)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    value = np.mean(logsum - shifted[rows, y])

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, y] -= 1.0
        return (g * p / z.shape[0],)

    return _make(np.asarray(value), (logits,), backward, "softmax_ce")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------
@dataclass
class Tape:
    """Recorded operations reachable from a loss, in creation (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ancestor ``t`` with
    ``requires_grad``.  Returns the replayed tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
