"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Operations build a computation graph on
the fly; calling :meth:`Tensor.backward` on a scalar result walks the graph
in reverse topological order and accumulates gradients into ``.grad`` of
every reachable tensor that has ``requires_grad`` set.

Only the operations the encoder and alignment pipeline need are provided;
there is no general broadcasting beyond scalars.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(ValueError):
    """A value that must be finite is not."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy-backed array node in a dynamic computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run reverse-mode differentiation from this node.

        ``seed`` defaults to 1 and is only optional for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    # same shape, or one side is a scalar (size 1)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    return _make_node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.shape))

    return _make_node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    return _make_node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(-g)

    return _make_node(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)

    return _make_node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make_node(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g * (0.5 / out_data))

    return _make_node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def backward(g):
        a.accumulate_grad(g * mask)

    return _make_node(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make_node(out_data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a.accumulate_grad(g.transpose(inv))

    return _make_node(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make_node(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make_node(out_data, tuple(tensors), backward)


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d vector."""
    return concat([reshape(t, (1,)) for t in tensors], axis=0)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; gradient scatter-adds back."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got shape {a.shape}")
    indices = np.asarray(indices, dtype=np.intp)
    out_data = a.data[indices]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        a.accumulate_grad(buf)

    return _make_node(out_data, (a,), backward)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick entries (rows[i], cols[i]) of a 2-d tensor into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = a.data[rows, cols]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, cols), g)
        a.accumulate_grad(buf)

    return _make_node(out_data, (a,), backward)


def take(a: Tensor, indices) -> Tensor:
    """Pick entries of a 1-d tensor."""
    indices = np.asarray(indices, dtype=np.intp)
    out_data = a.data[indices]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        a.accumulate_grad(buf)

    return _make_node(out_data, (a,), backward)


def select_index(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Slice one entry off an axis (the axis disappears)."""
    out_data = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def backward(g):
        buf = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = index
        buf[tuple(idx)] = g
        a.accumulate_grad(buf)

    return _make_node(out_data, (a,), backward)


def _axes_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _axes_tuple(axis, a.ndim)
    out_data = a.data.sum(axis=axes)

    def backward(g):
        expanded = np.expand_dims(g, axes) if axes else g
        a.accumulate_grad(np.broadcast_to(expanded, a.shape).astype(a.data.dtype, copy=False))

    return _make_node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    axes = _axes_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes)
    inv = 1.0 / count

    def backward(g):
        expanded = np.expand_dims(g, axes) if axes else g
        a.accumulate_grad(np.broadcast_to(expanded * inv, a.shape).astype(a.data.dtype, copy=False))

    return _make_node(out_data, (a,), backward)


def reduce_min(a: Tensor, axis: int = 1) -> tuple[Tensor, np.ndarray]:
    """Row-wise minimum of a 2-d tensor and its argmin columns.

    Gradient flows only into the selected entries; ties resolve to the
    lowest column index.
    """
    if a.ndim != 2:
        raise ShapeError(f"reduce_min expects a 2-d tensor, got shape {a.shape}")
    if axis != 1:
        raise ValueError("reduce_min supports axis=1 only")
    arg = np.argmin(a.data, axis=1)
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, arg]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[rows, arg] = g
        a.accumulate_grad(buf)

    return _make_node(out_data, (a,), backward), arg


def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    """Numerically stable log(sum(exp(x))); gradient is the softmax."""
    if axis is None:
        mx = np.max(a.data)
        shifted = a.data - mx
        s = np.exp(shifted).sum()
        out_data = np.asarray(mx + np.log(s), dtype=a.data.dtype)

        def backward(g):
            a.accumulate_grad(g * np.exp(a.data - out_data))

        return _make_node(out_data, (a,), backward)

    mx = np.max(a.data, axis=axis, keepdims=True)
    s = np.exp(a.data - mx).sum(axis=axis, keepdims=True)
    out_keep = mx + np.log(s)
    out_data = np.squeeze(out_keep, axis=axis)

    def backward(g):
        soft = np.exp(a.data - out_keep)
        a.accumulate_grad(np.expand_dims(g, axis) * soft)

    return _make_node(out_data, (a,), backward)


def normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-d tensor to unit length; eps guards zero rows."""
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows expects a 2-d tensor, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    denom = (norms + eps)[:, None]
    out_data = a.data / denom

    def backward(g):
        # y = x / (|x| + eps); dx = g/denom - x * (x . g) / (denom^2 |x|)
        dot = (a.data * g).sum(axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)[:, None]
        correction = np.where(norms[:, None] > 0, a.data * dot / (denom * denom * safe), 0.0)
        a.accumulate_grad((g / denom - correction).astype(a.data.dtype, copy=False))

    return _make_node(out_data, (a,), backward)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax on a plain array (no graph)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
