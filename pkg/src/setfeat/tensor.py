"""Dense tensors with reverse-mode automatic differentiation.

The engine keeps a dynamic DAG: every differentiable operation returns a new
Tensor holding references to its parents and a closure computing the parent
gradients from the upstream gradient.  `backward` walks the DAG once in
reverse topological order and accumulates (+=) into the `.grad` of every
leaf tensor that requires gradients.  Interior gradients live only for the
duration of the pass.

Two global precision modes are supported: "f32" for training speed and
"f64" for finite-difference gradient checking.  The mode fixes the dtype of
newly created tensors; it can be preset through the SETFEAT_PRECISION
environment variable.
"""

from __future__ import annotations

import os
import threading

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_precision = os.environ.get("SETFEAT_PRECISION", "f32")
if _precision not in _DTYPES:
    _precision = "f32"

_tls = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _precision = mode


def get_precision() -> str:
    return _precision


def dtype() -> type:
    return _DTYPES[_precision]


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (thread-local)."""

    def __enter__(self):
        self._saved = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._saved
        return False


class Tensor:
    """N-d array with optional gradient tape node.

    data is always a contiguous row-major numpy array in the engine dtype
    active at construction time.  Leaf tensors (no parents) with
    requires_grad=True receive accumulated gradients from `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._prev = ()
        t._backward = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functional forms below carry the real logic.
    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=ref.data.dtype)
    t.grad = None
    t.requires_grad = False
    t._prev = ()
    t._backward = None
    return t


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result; records the tape edge only when grads are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    record = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = record
    if record:
        out._prev = parents
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    return out


def backward(root: Tensor) -> None:
    """Reverse pass from a scalar root; accumulates into requires_grad leaves."""
    if root.data.size != 1:
        raise ValueError(
            f"backward: root must be a scalar tensor, got shape {root.shape}"
        )
    if not root.requires_grad:
        return

    # Iterative post-order DFS over the grad-requiring subgraph.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._prev, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and linear operations
# ---------------------------------------------------------------------------


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    # Broadcasting is restricted to scalar-against-tensor.
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def clip_min(a: Tensor, c: float) -> Tensor:
    c = float(c)
    mask = a.data > c
    return _make(np.maximum(a.data, c), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes differ: {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul: expects 2-d or batched 3-d pairs, got {a.shape} @ {b.shape}")

    def bwd(g):
        if a.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        return g @ b.data.swapaxes(1, 2), a.data.swapaxes(1, 2) @ g

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inv),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(
        np.ascontiguousarray(a.data.reshape(shape)),
        (a,),
        lambda g: (g.reshape(old),),
    )


def concat_axis(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_axis: needs at least one tensor")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(
            s[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(
                f"concat_axis: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    return _make(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def _argreduce_bwd(a: Tensor, axis: int, idx: np.ndarray):
    def bwd(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(
            out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return (out,)

    return bwd


def min_axis(a: Tensor, axis: int) -> Tensor:
    """Minimum along an axis; subgradient routes to the first argmin."""
    idx = a.data.argmin(axis=axis)
    return _make(a.data.min(axis=axis), (a,), _argreduce_bwd(a, axis, idx))


def max_axis(a: Tensor, axis: int) -> Tensor:
    idx = a.data.argmax(axis=axis)
    return _make(a.data.max(axis=axis), (a,), _argreduce_bwd(a, axis, idx))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sel = [slice(None)] * a.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)

    def bwd(g):
        out = np.zeros_like(a.data)
        out[sel] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[sel]), (a,), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """a[..., C] + b[C], gradient for b summed over leading axes."""
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {a.shape}")
    axes = tuple(range(a.ndim - 1))
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
