"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its inputs and a backward closure on
the output tensor together with a global recording sequence number.  Calling
:meth:`Tensor.backward` collects the recorded operations reachable from the
loss into a :class:`GradientTape` and replays them in exact reverse order of
recording.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable operation recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        GradientTape.from_root(self).backward(self, grad)

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradientTape:
    """Recorded operations reachable from a root, in recording order."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> GradientTape:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda t: t._seq)
        return cls(found)

    def replay_order(self) -> list[Tensor]:
        return self.records[::-1]

    def backward(self, root: Tensor, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
        touched: dict[int, Tensor] = {id(root): root}
        for node in self.replay_order():
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _accumulate(node, g)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                touched[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves (no recorded backward) receive whatever remains
        for key, g in grads.items():
            _accumulate(touched[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


# -- helpers ----------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = -1
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_sequence)
    else:
        out._parents = ()
        out._backward = None
    return out


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def identity(a) -> Tensor:
    return as_tensor(a)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs": absolute,
    "identity": identity,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if b is None else fn(a, b)


def activation(name: str) -> Callable[[Tensor], Tensor]:
    if name not in ("tanh", "sigmoid", "identity"):
        raise ValueError(f"unsupported activation {name!r}")
    return _ELEMENTWISE[name]


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank>=2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one BLAS call
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), backward_folded)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


# -- structural -----------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _norm_axes(axis, len(shape)))
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in _norm_axes(axis, a.ndim)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; out-of-range indices raise IndexError."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(ts, axis=axis)


def roll(a, shift: int, axis: int = -1) -> Tensor:
    """Circular shift with ``roll([v1..vL], s) = [v_{s+1}, .., vL, v1, .., v_s]``."""
    a = as_tensor(a)
    n = a.shape[axis]
    s = int(shift) % n
    return _make(np.roll(a.data, -s, axis=axis), (a,), lambda g: (np.roll(g, s, axis=axis),))


def _flat_scatter(shape: tuple[int, ...], flat_index: np.ndarray, values: np.ndarray) -> np.ndarray:
    size = int(np.prod(shape))
    return np.bincount(flat_index.ravel(), weights=values.ravel(), minlength=size).reshape(shape)


def take_along_axis(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather ``a`` along ``axis`` with broadcasting ``indices`` (numpy semantics)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != a.ndim:
        raise ShapeError(f"indices rank {indices.ndim} differs from tensor rank {a.ndim}")
    out_shape = list(np.broadcast_shapes(tuple(1 if i == axis else n for i, n in enumerate(a.shape)),
                                         tuple(1 if i == axis else n for i, n in enumerate(indices.shape))))
    out_shape[axis] = indices.shape[axis]
    idx_shape = list(out_shape)
    idx = np.broadcast_to(indices, idx_shape)
    src_shape = list(out_shape)
    src_shape[axis] = a.shape[axis]
    src = np.broadcast_to(a.data, src_shape)
    out = np.take_along_axis(src, idx, axis=axis)
    a_shape = a.shape

    def backward(g):
        grid = np.indices(idx_shape, sparse=True)
        coords = list(grid)
        coords[axis] = idx
        flat = np.ravel_multi_index(tuple(np.broadcast_to(c, idx_shape) for c in coords), src_shape)
        full = _flat_scatter(tuple(src_shape), flat, g)
        return (unbroadcast(full, a_shape),)

    return _make(out, (a,), backward)


def _segment_matrix(ids: np.ndarray, num_segments: int) -> np.ndarray:
    return (ids[None, :] == np.arange(num_segments)[:, None]).astype(np.float64)


def _scatter_rows(ids: np.ndarray, rows: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum ``rows[e]`` into bucket ``ids[e]`` along the leading axis."""
    flat = rows.reshape(rows.shape[0], -1)
    out = _segment_matrix(ids, num_segments) @ flat
    return out.reshape((num_segments,) + rows.shape[1:])


def take(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather whole slices of ``a`` along ``axis`` (``np.take`` semantics)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ShapeError("take expects a 1-D index array")
    n = a.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"take index out of range for axis of length {n}")

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return (np.moveaxis(_scatter_rows(indices, moved, n), 0, axis),)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int, axis: int) -> Tensor:
    """Sum slices of ``a`` along ``axis`` into ``num_segments`` buckets."""
    a = as_tensor(a)
    axis = axis % a.ndim
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.moveaxis(_scatter_rows(ids, np.moveaxis(a.data, axis, 0), num_segments), 0, axis)
    return _make(out, (a,), lambda g: (np.take(g, ids, axis=axis),))


def _segment_max(ids: np.ndarray, x: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.full((num_segments,) + x.shape[1:], -np.inf)
    if ids.size and np.all(np.diff(ids) >= 0):
        starts = np.flatnonzero(np.r_[True, np.diff(ids) > 0])
        out[ids[starts]] = np.maximum.reduceat(x, starts, axis=0)
    else:
        np.maximum.at(out, ids, x)
    return out


def segment_softmax(a, segment_ids: np.ndarray, num_segments: int, axis: int) -> Tensor:
    """Softmax over groups of entries along ``axis`` sharing a segment id."""
    a = as_tensor(a)
    axis = axis % a.ndim
    ids = np.asarray(segment_ids, dtype=np.intp)
    x = np.moveaxis(a.data, axis, 0)
    seg_max = _segment_max(ids, x, num_segments)
    e = np.exp(x - seg_max[ids])
    denom = _scatter_rows(ids, e, num_segments)
    s = e / denom[ids]
    out = np.moveaxis(s, 0, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        dot = _scatter_rows(ids, gm * s, num_segments)
        return (np.moveaxis(s * (gm - dot[ids]), 0, axis),)

    return _make(out, (a,), backward)


_STRUCTURAL = {
    "concat": concat,
    "slice": slice_axis,
    "reshape": reshape,
    "transpose": transpose,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "roll": roll,
}


def structural(op: str, *args, **kwargs) -> Tensor:
    """Dispatch a structural primitive by name."""
    try:
        fn = _STRUCTURAL[op]
    except KeyError:
        raise ValueError(f"unknown structural op {op!r}") from None
    return fn(*args, **kwargs)


def backward(loss: Tensor) -> None:
    loss.backward()
