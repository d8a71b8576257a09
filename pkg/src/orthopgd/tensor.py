"""Dense float64 tensors with an explicit reverse-mode gradient tape.

Every operation is a pure function of its inputs.  When at least one input is
attached to a :class:`GradTape`, the result is recorded on that tape together
with a vector-Jacobian product, and :meth:`GradTape.backward` later walks the
records in reverse order.

Tapes are never global: each forward/backward pass owns one, so independent
passes may run concurrently.

    >>> tape = GradTape()
    >>> x = tape.watch([3.0])
    >>> grads = tape.backward(sum_(x * x))
    >>> grads[x]
    array([6.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GradTape",
    "Gradients",
    "NumericError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "clamp",
    "concat",
    "div",
    "elementwise",
    "exp",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "segment_sum",
    "softmax_cross_entropy",
    "sqrt",
    "sub",
    "sum_",
    "take",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the mathematical domain of the operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class _Node:
    __slots__ = ("tape", "index", "generation")

    def __init__(self, tape: GradTape, index: int, generation: int):
        self.tape = tape
        self.index = index
        self.generation = generation


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable n-dimensional array of 64-bit reals.

    ``Tensor(data)`` always copies ``data``; the stored array is read-only.
    """

    __slots__ = ("data", "_node")
    __array_priority__ = 100

    def __init__(self, data, *, _node: _Node | None = None, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        self.data = _frozen(arr)
        self._node = _node

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: _Node | None = None) -> Tensor:
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr, dtype=np.float64)
        elif arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        elif arr.flags.writeable and not arr.flags.owndata:
            arr = arr.copy()
        return cls(arr, _node=node, _copy=False)

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
    def grad_id(self) -> int | None:
        """Index of this value on its tape, or None when detached."""
        node = self._node
        if node is None or node.generation != node.tape._generation:
            return None
        return node.index

    @property
    def tape(self) -> GradTape | None:
        return self._node.tape if self.grad_id is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = "" if self.grad_id is None else f", grad_id={self.grad_id}"
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Gradients:
    """Result of a backward pass: maps watched leaves to their gradients."""

    def __init__(self, grads: dict[int, np.ndarray], generation: int, tape: GradTape):
        self._grads = grads
        self._generation = generation
        self._tape = tape

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        node = leaf._node
        if node is None or node.tape is not self._tape or node.generation != self._generation:
            raise KeyError("tensor was not watched on this tape pass")
        try:
            return self._grads[node.index]
        except KeyError:
            raise KeyError("tensor is not a watched leaf") from None

    def __len__(self) -> int:
        return len(self._grads)

    def __iter__(self):
        return iter(self._grads)


class GradTape:
    """Append-only record of differentiable operations.

    A tape is single-threaded.  After :meth:`backward` it is cleared and can
    be reused; tensors recorded during the previous pass become detached.
    """

    def __init__(self):
        self._generation = 0
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._vjps)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a leaf that requires a gradient."""
        data = value.data if isinstance(value, Tensor) else np.array(value, dtype=np.float64)
        if isinstance(value, Tensor):
            data = data.copy()
        index = self._append((), None, data.shape)
        self._leaves.append(index)
        return Tensor(data, _node=_Node(self, index, self._generation), _copy=False)

    def _append(self, parents, vjp, shape) -> int:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(shape)
        return len(self._vjps) - 1

    def _record(self, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        parents = tuple(-1 if t.grad_id is None else t.grad_id for t in inputs)
        index = self._append(parents, vjp, data.shape)
        return Tensor._wrap(data, _Node(self, index, self._generation))

    def reset(self) -> None:
        self._generation += 1
        self._parents.clear()
        self._vjps.clear()
        self._shapes.clear()
        self._leaves.clear()

    def backward(self, loss: Tensor) -> Gradients:
        """Propagate d(loss)/d(leaf) to every watched leaf, then clear the tape."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.tape is not self or loss.grad_id is None:
            raise ValueError("loss is not attached to this tape")
        pending: dict[int, np.ndarray] = {node.index: np.ones(loss.shape)}
        for index in range(node.index, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            vjp = self._vjps[index]
            if vjp is None:
                pending[index] = grad
                continue
            parents = self._parents[index]
            for parent, g in zip(parents, vjp(grad)):
                if parent < 0 or g is None:
                    continue
                if parent in pending:
                    pending[parent] = pending[parent] + g
                else:
                    pending[parent] = g
        grads = {}
        for leaf in self._leaves:
            g = pending.get(leaf)
            grads[leaf] = np.zeros(self._shapes[leaf]) if g is None else np.asarray(g, dtype=np.float64)
        result = Gradients(grads, self._generation, self)
        self.reset()
        return result

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        sources = list(sources)
        grads = self.backward(loss)
        return [grads[s] for s in sources]


def backward(loss: Tensor) -> Gradients:
    """Run the backward pass of the tape ``loss`` is attached to."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss is detached from any tape")
    return tape.backward(loss)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        tp = t.tape
        if tp is None:
            continue
        if tape is not None and tp is not tape:
            raise ValueError("operands are attached to different tapes")
        tape = tp
    return tape


def _finish(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(data)
    return tape._record(data, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _finish(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _finish(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _finish(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.data)
        except FloatingPointError:
            raise NumericError("exp overflowed") from None
    return _finish(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be positive")
    ad = a.data
    return _finish(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)
    if np.any(out == 0):
        # the derivative is unbounded at zero
        return _finish(out, (a,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0.0),))
    return _finish(out, (a,), lambda g: (g / (2 * out),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes inside the closed range, zero outside."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _finish(out, (a,), lambda g: (g * inside,))


_UNARY = {"neg": neg, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, neg, relu, exp, log, clamp)."""
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "clamp":
        return clamp(a, **kwargs)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _finish(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None
    return _finish(out.copy(), (a,), lambda g: (g.reshape(old),))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back into place."""
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data[index], dtype=np.float64)

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _finish(out.copy(), (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(out, tensors, vjp)


def segment_sum(values, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum ``values`` along the last axis into ``num_segments`` buckets.

    ``values`` has shape ``[..., m]`` and ``segment_ids`` is an integer array of
    shape ``[m]`` or ``values.shape``; the result has shape ``[..., num_segments]``.
    """
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.intp)
    vd = values.data
    if ids.shape != vd.shape and ids.shape != vd.shape[-1:]:
        raise ShapeError(f"segment_sum: ids shape {ids.shape} vs values {vd.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise DomainError("segment_sum: segment id out of range")
    lead = vd.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    flat = vd.reshape(rows, -1)
    ids2 = np.broadcast_to(ids, vd.shape).reshape(rows, -1)
    offsets = (np.arange(rows) * num_segments)[:, None]
    keys = (ids2 + offsets).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=rows * num_segments)
    out = out.reshape(*lead, num_segments)

    def vjp(g):
        g2 = g.reshape(rows, num_segments)
        return (np.take_along_axis(g2, ids2, axis=1).reshape(vd.shape),)

    return _finish(out, (values,), vjp)


def log_softmax(logits) -> Tensor:
    """Row-wise log-softmax, stabilised by subtracting the row maximum."""
    z = as_tensor(logits)
    zd = z.data
    shifted = zd - zd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _finish(out, (z,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def softmax_cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Cross entropy of ``softmax(logits)`` against integer class targets.

    ``reduction`` is ``"mean"`` (default), ``"sum"`` or ``"none"`` (per row).
    """
    z = as_tensor(logits)
    if z.ndim == 1:
        z = reshape(z, (1, -1))
    b, n = z.shape
    if n < 2:
        raise ShapeError("softmax_cross_entropy needs at least two classes")
    t = np.broadcast_to(np.asarray(target, dtype=np.intp), (b,))
    if np.any(t < 0) or np.any(t >= n):
        raise DomainError(f"target out of range [0, {n})")
    zd = z.data
    shifted = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    per_row = lse - shifted[rows, t]
    soft = np.exp(shifted - lse[:, None])
    onehot = np.zeros_like(soft)
    onehot[rows, t] = 1.0
    dz = soft - onehot

    if reduction == "none":
        return _finish(per_row, (z,), lambda g: (dz * g[:, None],))
    if reduction == "sum":
        return _finish(np.asarray(per_row.sum()), (z,), lambda g: (dz * g,))
    if reduction == "mean":
        return _finish(np.asarray(per_row.mean()), (z,), lambda g: (dz * (g / b),))
    raise ValueError(f"unknown reduction {reduction!r}")
