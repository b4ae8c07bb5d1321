"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array.  Operations on tensors that
need gradients record their parents and a backward closure; :func:`backward`
walks that graph in reverse topological order and *accumulates* gradients
into trainable leaves.  Two precisions are supported, ``"standard"``
(float32) and ``"high"`` (float64); combining them in one operation is an
error.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PRECISIONS = {"standard": np.dtype(np.float32), "high": np.dtype(np.float64)}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAMES_DTYPE = {v: k for k, v in _DTYPE_NAMES.items()}

_grad_enabled = True


def _contiguous(arr: np.ndarray, dtype=None) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(arr, dtype=dtype)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible for an operation."""


class PrecisionError(TypeError):
    """Raised when tensors of different precision meet in one operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None):
        arr = np.asarray(data)
        if precision is not None:
            dtype = PRECISIONS[precision]
        elif arr.dtype in _DTYPE_NAMES:
            dtype = arr.dtype
        else:
            dtype = PRECISIONS["standard"]
        self.data = _contiguous(arr, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _contiguous(data)
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

    # -- introspection ----------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "high" if self.data.dtype == np.float64 else "standard"

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision!r}, op={self.op!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a name and per-parameter optimizer state."""

    __slots__ = ("name", "state")

    def __init__(self, data, name: str = "", precision: str | None = None):
        super().__init__(data, requires_grad=True, precision=precision)
        self.name = name
        self.state: dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, precision={self.precision!r})"


def tensor(data, requires_grad: bool = False, precision: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, precision=precision)


def zeros(shape, precision: str = "standard", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, PRECISIONS[precision]), requires_grad)


def ones(shape, precision: str = "standard", requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, PRECISIONS[precision]), requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


# -- helpers ----------------------------------------------------------------
def _coerce(a, b, op: str) -> tuple[Tensor, Tensor]:
    """Lift plain numbers/arrays to constants of the tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise PrecisionError(f"{op}: cannot mix {a.precision} and {b.precision} precision tensors")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError(f"{op}: at least one operand must be a Tensor")


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast extents {' and '.join(str(tuple(s)) for s in shapes)}") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b, "add")
    _broadcast_shape("add", a.shape, b.shape)

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b, "sub")
    _broadcast_shape("sub", a.shape, b.shape)

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b, "mul")
    _broadcast_shape("mul", a.shape, b.shape)

    def _bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b, "div")
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def _bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), _bw, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} and {b.shape}")

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), _bw, "matmul")


# -- elementwise unary --------------------------------------------------------
def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x: Tensor, exponent: float) -> Tensor:
    p = x.data.dtype.type(exponent)

    def _bw(g):
        return (g * p * x.data ** (p - 1),)

    return Tensor._from_op(x.data ** p, (x,), _bw, "power")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))
    return Tensor._from_op(out, (x,), lambda g: (g * (out > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    info = np.finfo(z.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and shape ops ----------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axes, keepdims) * (1.0 / n)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient is shared equally among ties."""
    axes = _norm_axes(axis, x.ndim)
    top = x.data.max(axis=axes, keepdims=True)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = x.data == top
        return (g * hit / hit.sum(axis=axes, keepdims=True),)

    out = top if keepdims else top.reshape([n for i, n in enumerate(x.shape) if i not in axes])
    return Tensor._from_op(out, (x,), _bw, "max")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view extents {x.shape} as {tuple(shape)}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def _bw(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (x,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise PrecisionError("concat: cannot mix precisions")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat: extents {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, _bw, "concat")


# -- backward -----------------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every trainable ancestor."""
    if any(n != 1 for n in root.shape):
        raise ShapeError(f"backward: root must be scalar-shaped, got extents {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- gradient checking ----------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``sum(f(*inputs))`` with central differences.

    Every input must be a high-precision tensor with ``requires_grad``.  With
    ``n_samples`` set, that many coordinates per input are drawn at random
    instead of checking all of them.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise PrecisionError("grad_check requires high-precision inputs")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check: non-finite input values")

    def scalar_out() -> Tensor:
        out = f(*inputs)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("grad_check: f produced non-finite values")
        return out if out.size == 1 and out.ndim == 0 else sum_(out)

    for t in inputs:
        t.grad = None
    backward(scalar_out())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    per_input, checked = [], 0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if n_samples is not None and n_samples < flat.size:
                coords = rng.choice(flat.size, size=n_samples, replace=False)
            numeric = np.empty(coords.size)
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = float(scalar_out().data)
                flat[c] = orig - h
                fm = float(scalar_out().data)
                flat[c] = orig
                numeric[j] = (fp - fm) / (2 * h)
            err = _rel_error(a.reshape(-1)[coords], numeric, floor)
            per_input.append(float(err.max()) if err.size else 0.0)
            checked += coords.size
    for t in inputs:
        t.grad = None
    return GradCheckReport(max(per_input, default=0.0), tol, per_input, checked)


# -- snapshot format ------------------------------------------------------------
def tensor_to_bytes(x: Tensor | np.ndarray) -> bytes:
    """Serialize as ``TNSR v1 <dtype> <rank> <extents...>\\n`` + little-endian data."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _DTYPE_NAMES:
        raise TypeError(f"unsupported snapshot dtype {arr.dtype}")
    header = " ".join(["TNSR", "v1", _DTYPE_NAMES[arr.dtype], str(arr.ndim), *map(str, arr.shape)])
    body = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header.encode("ascii") + b"\n" + body


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    nl = raw.index(b"\n")
    parts = raw[:nl].decode("ascii").split()
    if len(parts) < 4 or parts[0] != "TNSR" or parts[1] != "v1":
        raise ValueError("not a TNSR v1 snapshot")
    dtype = _NAMES_DTYPE.get(parts[2])
    if dtype is None:
        raise ValueError(f"unknown snapshot dtype {parts[2]!r}")
    rank = int(parts[3])
    shape = tuple(int(p) for p in parts[4:])
    if len(shape) != rank:
        raise ValueError("snapshot rank does not match extents")
    arr = np.frombuffer(raw[nl + 1:], dtype=dtype.newbyteorder("<"))
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError("snapshot payload size does not match extents")
    return arr.astype(dtype).reshape(shape)


def save_tensor(path: str | Path, x: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
