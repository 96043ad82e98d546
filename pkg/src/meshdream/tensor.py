"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor` wrapping a read-only numpy array. Operations
on tensors that require gradients record a node holding the parents and a
vector-Jacobian closure; :func:`backward` walks those nodes in reverse
topological order and returns a map from leaf tensors to their gradients.

Shapes are explicit: binary elementwise ops accept either two tensors of the
same shape or a tensor and a Python scalar. Use :meth:`Tensor.broadcast_to`
when a broadcast is genuinely wanted.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "make_op",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "concat",
    "stack",
    "where",
    "scatter_add",
    "gradcheck",
]

_GRAD_ENABLED = True
_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _freeze(a, copy: bool = True) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.flags.writeable:
        # caller-owned arrays are copied so freezing never alters them
        if copy and arr is a:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array that may take part in a differentiation graph.

    ``node`` is ``None`` for leaves; otherwise it is the integer handle of the
    node that produced this tensor. Handles increase monotonically, so sorting
    by handle gives a valid topological order.
    """

    __slots__ = ("data", "requires_grad", "node", "_parents", "_vjp", "name", "__weakref__")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _freeze(data)
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def min(self, axis=None):
        return reduce_min(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def take(self, indices):
        return take(self, indices)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def silu(self):
        return silu(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create the output of a differentiable operation.

    ``vjp(g)`` receives the upstream gradient (an ndarray shaped like ``data``)
    and returns one gradient array (or ``None``) per parent. Nothing is
    recorded when no parent requires a gradient or recording is disabled.
    """
    out = Tensor.__new__(Tensor)
    out.data = _freeze(data, copy=False)
    out.requires_grad = False
    out.node = None
    out._parents = ()
    out._vjp = None
    out.name = ""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = next(_node_counter)
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------
def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast_scalar(g: np.ndarray, shape) -> np.ndarray:
    # only 0-d operands may be broadcast implicitly
    if shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _scalar(b, op: str) -> float:
    if np.ndim(b) != 0:
        raise ShapeError(f"{op}: non-scalar constants must be wrapped in a Tensor")
    return float(b)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a, b = _as_tensor(a), _scalar(b, "add")
        return make_op(a.data + b, (a,), lambda g: (g,))
    a = _as_tensor(a)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a, b = _as_tensor(a), _scalar(b, "sub")
        return make_op(a.data - b, (a,), lambda g: (g,))
    a = _as_tensor(a)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a, s = _as_tensor(a), _scalar(b, "mul")
        return make_op(a.data * s, (a,), lambda g: (g * s,))
    a = _as_tensor(a)
    _check_same(a, b, "mul")
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast_scalar(g * bd, sa), _unbroadcast_scalar(g * ad, sb)))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = _as_tensor(a)
    _check_same(a, b, "div")
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast_scalar(g / bd, sa),
                              _unbroadcast_scalar(-g * out / bd, sb)))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    _check_same(a, b, "maximum")
    pick = a.data >= b.data
    return make_op(np.where(pick, a.data, b.data), (a, b),
                   lambda g: (np.where(pick, g, 0.0), np.where(pick, 0.0, g)))


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    _check_same(a, b, "where")
    return make_op(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------
def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_op(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def absolute(a: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    sgn = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_op(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = 0.5 * (np.tanh(0.5 * ad) + 1.0)
    return make_op(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand_back(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    return make_op(a.data.sum(axis=axis), (a,),
                   lambda g: (_expand_back(np.asarray(g), shape, axis).copy(),))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in axis]))
    return make_op(a.data.mean(axis=axis), (a,),
                   lambda g: (_expand_back(np.asarray(g) / n, shape, axis).copy(),))


def _reduce_extreme(a: Tensor, axis, use_max: bool) -> Tensor:
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("min/max reduce over a single axis or all axes")
    arg = np.argmax if use_max else np.argmin
    shape = a.shape
    if axis is None:
        idx = int(arg(a.data))  # first attaining flat index
        out = a.data.reshape(-1)[idx]

        def vjp(g):
            grad = np.zeros(a.size)
            grad[idx] = g
            return (grad.reshape(shape),)

        return make_op(out, (a,), vjp)
    ax = _norm_axis(axis, a.ndim)[0]
    idx = np.expand_dims(arg(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)

    def vjp(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, idx, np.expand_dims(g, ax), axis=ax)
        return (grad,)

    return make_op(out, (a,), vjp)


def reduce_max(a: Tensor, axis=None) -> Tensor:
    """Maximum; the gradient goes to the first attaining element."""
    return _reduce_extreme(a, axis, True)


def reduce_min(a: Tensor, axis=None) -> Tensor:
    """Minimum; the gradient goes to the first attaining element."""
    return _reduce_extreme(a, axis, False)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return make_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return make_op(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None). Fancy indexing uses :func:`take`."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise TypeError("Tensor indexing supports basic slicing only; use take() for gathers")
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        grad = np.zeros(shape)
        grad[key] = g
        return (grad,)

    return make_op(out, (a,), vjp)


def take(a: Tensor, indices) -> Tensor:
    """Gather rows: ``a[indices]`` along axis 0; gradient scatters back with accumulation."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        return (_scatter_rows(idx, g, shape),)

    return make_op(a.data[idx], (a,), vjp)


def _scatter_rows(idx: np.ndarray, vals: np.ndarray, shape) -> np.ndarray:
    n = shape[0]
    flat_idx = idx.reshape(-1)
    rest = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    v = vals.reshape(flat_idx.size, rest)
    if rest == 1:
        out = np.bincount(flat_idx, weights=v[:, 0], minlength=n)
        return out.reshape(shape)
    cols = np.arange(rest)
    lin = (flat_idx[:, None] * rest + cols[None, :]).reshape(-1)
    out = np.bincount(lin, weights=v.reshape(-1), minlength=n * rest)
    return out.reshape(shape)


def scatter_add(values: Tensor, indices, num_rows: int) -> Tensor:
    """Sum rows of ``values`` into a zero tensor of ``num_rows`` rows at ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != values.shape[: idx.ndim]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} vs values {values.shape}")
    shape = (num_rows,) + values.shape[idx.ndim:]
    out = _scatter_rows(idx, values.data, shape)
    return make_op(out, (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# linear algebra and softmax
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d tensors (or a batch of them with equal leading dims)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return make_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# row-vector helpers for (N, 3) tensors
# ---------------------------------------------------------------------------
def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    return reduce_sum(mul(a, b), axis=1)


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def normalize_rows(a: Tensor, floor: float = 0.0) -> Tensor:
    norm = sqrt(reduce_sum(mul(a, a), axis=1) + floor)
    return div(a, broadcast_to(reshape(norm, (-1, 1)), a.shape))


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of ``a`` by the matching entry of 1-d ``s``."""
    return mul(a, broadcast_to(reshape(s, (-1,) + (1,) * (a.ndim - 1)), a.shape))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------
def backward(root: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every reachable leaf.

    Returns a dict keyed by leaf tensor (identity) holding arrays shaped like
    the leaf. Leaves that do not require gradients never appear.
    """
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        seed = np.ones(root.shape)
    if not root.requires_grad:
        return {}

    # collect the subgraph
    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack_ = [root]
    seen = set()
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        nodes[t.node] = t
        stack_.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    for handle in sorted(nodes, reverse=True):
        t = nodes[handle]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for p, gp in zip(t._parents, t._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return {leaves[k]: np.asarray(v).reshape(leaves[k].shape)
            for k, v in grads.items() if k in leaves}


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------
def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                       eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` with respect to each input array."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    out = []
    with no_grad():
        for i, x in enumerate(arrays):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                hi = fn(*[Tensor(a) for a in arrays]).item()
                flat[j] = orig - eps
                lo = fn(*[Tensor(a) for a in arrays]).item()
                flat[j] = orig
                gflat[j] = (hi - lo) / (2 * eps)
            out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest numeric entry (inf-norm relative error)."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray],
              eps: float = 1e-6) -> float:
    """Worst relative error between autodiff and central differences over all inputs."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    grads = backward(out)
    numeric = numerical_gradient(fn, inputs, eps)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        ana = grads.get(leaf, np.zeros_like(num))
        worst = max(worst, relative_error(ana, num))
    return worst
