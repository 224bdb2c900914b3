"""Dense NCHW tensor with a reverse-mode gradient tape.

Operations executed while recording is enabled append an entry to the
thread's active :class:`Tape`. ``Tensor.backward`` replays the tape in
reverse from the root, accumulating gradients into leaf tensors that have
``requires_grad`` set. A tape can be replayed once; afterwards a fresh tape
becomes active.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "TapeError",
    "active_tape",
    "concat",
    "no_grad",
    "stack",
    "tensor",
]


class TapeError(RuntimeError):
    """Raised on invalid use of the gradient tape."""


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so every entry's inputs were
    produced by earlier entries (or are leaves).
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False

    def __len__(self):
        return len(self.entries)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        out.node = len(self.entries)
        self.entries.append(_Entry(out, inputs, backward))


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True
        self.flops: list[int] | None = None


_state = _State()


def active_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    """Discard the current recording and start a new tape."""
    _state.tape = Tape()
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def is_recording() -> bool:
    return _state.enabled


@contextlib.contextmanager
def count_flops():
    """Collect multiply-add work (2 ops each) of conv and matmul kernels.

    Yields a one-element list holding the running total.
    """
    prev = _state.flops
    _state.flops = [0]
    try:
        yield _state.flops
    finally:
        _state.flops = prev


def add_flops(n: int) -> None:
    if _state.flops is not None:
        _state.flops[0] += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional array participating in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None

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

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap ``data`` as the output of an op and record it if needed.

        ``backward`` maps the upstream gradient to a tuple with one entry per
        input (``None`` for inputs that need no gradient).
        """
        out = Tensor(data)
        if _state.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            _state.tape.record(out, tuple(inputs), backward)
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf this scalar depends on."""
        if grad is None and self.data.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {self.shape}")
        tape = self._tape
        if tape is None or self.node is None:
            raise TapeError("backward root is not on a tape")
        if tape.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if tape is not _state.tape:
            raise TapeError("backward root belongs to an inactive tape")

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)
        grads: dict[int, np.ndarray] = {id(self): seed}
        entries = tape.entries
        for idx in range(self.node, -1, -1):
            entry = entries[idx]
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None or inp._tape is not tape:
                    # leaf
                    ig = ig.reshape(inp.shape)
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
                    else:
                        inp.grad += ig
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
        tape.consumed = True
        tape.entries = []
        _state.tape = Tape()

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other, self.dtype), self)

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype
        basic = _is_basic_index(index)

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- unary math -------------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1 - y * y),))

    def sigmoid(self):
        y = _sigmoid(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y * (1 - y),))

    def clip_min(self, lo: float):
        x = self.data
        mask = x >= lo
        return Tensor._make(np.maximum(x, lo), (self,), lambda g: (g * mask,))

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        axes = _norm_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False):
        x = self.data
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=x.dtype)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis)
            return (full,)

        if not keepdims:
            out = np.squeeze(out, axis)
        return Tensor._make(out, (self,), backward)

    # -- shape manipulation ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def pad(self, widths: Sequence[tuple[int, int]]):
        """Zero-pad; ``widths`` lists (before, after) per axis."""
        widths = tuple(tuple(w) for w in widths)
        if all(w == (0, 0) for w in widths):
            return self
        slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, self.shape))
        return Tensor._make(np.pad(self.data, widths), (self,), lambda g: (g[slices],))

    def take(self, indices: np.ndarray, axis: int):
        """Gather along ``axis`` with a fixed integer index array."""
        indices = np.asarray(indices)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
            np.add.at(moved, indices, gm)
            return (full,)

        return Tensor._make(np.take(self.data, indices, axis=axis), (self,), backward)


def _is_basic_index(index) -> bool:
    """True when ``index`` selects each element at most once (no arrays)."""
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimension mismatch: {a.shape[-1]} (lhs last) vs {b.shape[-2]} (rhs second-to-last)"
        )

    out = a.data @ b.data
    add_flops(2 * out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ndim = len(ref)
    axis = axis % ndim
    for i, t in enumerate(tensors[1:], 1):
        for d in range(ndim):
            if d != axis and t.shape[d] != ref[d]:
                raise ValueError(
                    f"concat input {i} has extent {t.shape[d]} on axis {d}, expected {ref[d]}"
                )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)
