"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array. Every primitive in this
module records itself on the innermost active :class:`GradTape`; calling
:func:`backward` on that tape replays the recorded nodes in reverse order.

Spatial primitives take ``(H, W, C)`` maps or ``(B, H, W, C)`` batches.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConfigError",
    "ShapeError",
    "Tensor",
    "GradTape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "split",
    "concat",
    "sum",
    "mean",
    "mean_rows",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "softmax_rows",
    "log_softmax_rows",
    "pick",
    "avg_pool2d_same",
    "max_pool2d_same",
    "conv2d_same",
    "downsample2",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A hyperparameter or configuration value is invalid."""


_DTYPES = {"float64": np.float64, "float32": np.float32}


class Tensor:
    """Immutable dense array of real scalars.

    Precision is fixed at construction: ``float64`` (default, used for all
    verification paths) or ``float32``. Hashing is by identity, so tensors
    can key gradient dictionaries.
    """

    __slots__ = ("_data", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, dtype: str | np.dtype | None = None):
        if isinstance(data, Tensor):
            data = data._data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        elif isinstance(dtype, str):
            dtype = _DTYPES[dtype]
        arr = np.array(data, dtype=dtype, copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def precision(self) -> str:
        return "float32" if self._data.dtype == np.float32 else "float64"

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.precision})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class GradTape:
    """Ordered record of primitive applications.

    Use as a context manager; one tape belongs to one thread and one
    training step. Nodes are appended in execution order, which is a valid
    topological order of the computation.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    result = Tensor._wrap(out)
    stack = _tape_stack()
    if stack:
        stack[-1].nodes.append(_Node(op, inputs, result, vjp))
    return result


def backward(tape: GradTape, loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Reverse-mode sweep over ``tape`` starting from a scalar ``loss``.

    With ``wrt`` given, returns a list of gradients aligned with it; leaves
    the loss does not depend on get zeros. Without ``wrt``, returns a dict
    mapping every reached leaf tensor to its gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        del grads[id(node.output)]
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    if wrt is not None:
        return [
            np.asarray(grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)), dtype=t.dtype)
            for t in wrt
        ]
    return {keep[k]: v for k, v in grads.items() if k not in produced}


# ---------------------------------------------------------------------------
# elementwise and algebra
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data / b.data
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("slice", x.data[index], (x,), vjp)


def split(x: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Cut ``axis`` into ``n`` equal contiguous blocks."""
    axis = axis % x.ndim
    size = x.shape[axis]
    if n < 1 or size % n:
        raise ConfigError(f"axis of length {size} does not split into {n} equal blocks")
    step = size // n
    return [_slice(x, axis, i * step, (i + 1) * step) for i in range(n)]


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of an empty list")
    axis = axis % parts[0].ndim
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _record("concat", out, parts, vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size / np.asarray(out).size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", np.asarray(out), (x,), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Mean along the last axis: ``[C, C] -> [C]``."""
    return mean(x, axis=-1)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row maximum."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", out, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", out, (x,), vjp)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b] = x[b, index[b]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick needs [B,K] and [B] operands, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[rows, index] = g
        return (full,)

    return _record("pick", x.data[rows, index], (x,), vjp)


# ---------------------------------------------------------------------------
# spatial primitives (stride 1, "same" extent)
# ---------------------------------------------------------------------------


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [H,W,C] or [B,H,W,C], got {x.shape}")


def _check_window(size: int, what: str) -> None:
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"{what} must be a positive odd integer, got {size}")


def _window_sum(xp: np.ndarray, size: int, h: int, w: int) -> np.ndarray:
    out = np.zeros((xp.shape[0], h, w, xp.shape[3]), dtype=xp.dtype)
    for i in range(size):
        for j in range(size):
            out += xp[:, i:i + h, j:j + w, :]
    return out


def _window_scatter(g: np.ndarray, size: int) -> np.ndarray:
    r = size // 2
    b, h, w, c = g.shape
    gp = np.zeros((b, h + 2 * r, w + 2 * r, c), dtype=g.dtype)
    for i in range(size):
        for j in range(size):
            gp[:, i:i + h, j:j + w, :] += g
    return gp[:, r:r + h, r:r + w, :]


def avg_pool2d_same(x: Tensor, p: int) -> Tensor:
    """Stride-1 average pooling; border windows average only in-bounds cells."""
    _check_window(p, "pool size")
    x4, squeeze = _as_batch(x)
    _, h, w, _ = x4.shape
    r = p // 2
    pad = ((0, 0), (r, r), (r, r), (0, 0))
    total = _window_sum(np.pad(x4, pad), p, h, w)
    count = _window_sum(np.pad(np.ones((1, h, w, 1), dtype=x4.dtype), pad), p, h, w)
    out = total / count

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = _window_scatter(g4 / count, p)
        return (gx[0] if squeeze else gx,)

    return _record("avg_pool2d_same", out[0] if squeeze else out, (x,), vjp)


def max_pool2d_same(x: Tensor, p: int) -> Tensor:
    """Stride-1 max pooling over in-bounds cells of each window."""
    _check_window(p, "pool size")
    x4, squeeze = _as_batch(x)
    b, h, w, c = x4.shape
    r = p // 2
    xp = np.pad(x4, ((0, 0), (r, r), (r, r), (0, 0)), constant_values=-np.inf)
    stack = np.stack([xp[:, i:i + h, j:j + w, :] for i in range(p) for j in range(p)])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        gp = np.zeros((b, h + 2 * r, w + 2 * r, c), dtype=g4.dtype)
        for k in range(p * p):
            i, j = divmod(k, p)
            gp[:, i:i + h, j:j + w, :] += np.where(arg == k, g4, 0.0)
        gx = gp[:, r:r + h, r:r + w, :]
        return (gx[0] if squeeze else gx,)

    return _record("max_pool2d_same", out[0] if squeeze else out, (x,), vjp)


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation (no kernel flip) with zero padding.

    ``kernel`` has shape ``[s, s, C, F]`` with ``s`` odd; ``bias`` has
    shape ``[F]``.
    """
    x4, squeeze = _as_batch(x)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be [s,s,C,F], got {kernel.shape}")
    s, _, c_in, f = kernel.shape
    _check_window(s, "kernel size")
    if x4.shape[3] != c_in:
        raise ShapeError(f"input has {x4.shape[3]} channels but kernel {kernel.shape} expects {c_in}")
    if bias.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},), got {bias.shape}")
    b, h, w, _ = x4.shape
    r = s // 2
    xp = np.pad(x4, ((0, 0), (r, r), (r, r), (0, 0)))
    # (B, H, W, C, s, s) -> (B, H, W, s, s, C)
    cols = sliding_window_view(xp, (s, s), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(b * h * w, s * s * c_in)
    k2 = kernel.data.reshape(s * s * c_in, f)
    out = (cols @ k2 + bias.data).reshape(b, h, w, f)

    def vjp(g):
        g4 = (g[None] if squeeze else g).reshape(b * h * w, f)
        gk = (cols.T @ g4).reshape(kernel.shape)
        gb = g4.sum(axis=0)
        gcols = (g4 @ k2.T).reshape(b, h, w, s, s, c_in)
        gp = np.zeros(xp.shape, dtype=g4.dtype)
        for i in range(s):
            for j in range(s):
                gp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
        gx = gp[:, r:r + h, r:r + w, :]
        return (gx[0] if squeeze else gx), gk, gb

    return _record("conv2d_same", out[0] if squeeze else out, (x, kernel, bias), vjp)


def downsample2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean; spatial dims must be even."""
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even spatial dims, got {x.shape}")
    blocks = reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
    n = len(lead)
    return mean(blocks, axis=(n + 1, n + 3))
