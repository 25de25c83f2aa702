"""Dense float64 tensors with reverse-mode differentiation.

The computation graph doubles as the tape: every tensor produced by a
differentiable op keeps references to its parents and a vjp closure.
``backward()`` walks the graph once, deposits gradients, and then drops
the tape references so each training step starts from a clean slate.

Shape discipline: elementwise ops require identical shapes or a python
scalar. ``broadcast_mul``/``broadcast_add`` are the only entry points
for numpy-style broadcasting and they require the smaller operand to
mark broadcast axes explicitly with extent 1 (same ndim). matmul accepts
matching leading batch dims, or a plain 2D operand on either side.

Ops whose math can produce non-finite values (exp, log, sqrt, div, pow,
softmax) validate their outputs and raise; linear ops trust that finite
inputs stay finite at this scale.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = contextvars.ContextVar("mmdit_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/sampling)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Row-major float64 buffer, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        if not np.isfinite(self.data).all():
            raise ContractError("tensor holds non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = None
        self._vjp = None

    # ---- construction helpers -------------------------------------------

    @classmethod
    def _wrap(cls, data, parents=None, vjp=None):
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = parents is not None
        t.grad = None
        t._parents = parents
        t._vjp = vjp
        return t

    # ---- basic introspection --------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{grad})"

    # ---- autodiff ---------------------------------------------------------

    def backward(self):
        """Reverse sweep from a scalar; clears the tape afterwards."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            dy = grads.pop(id(node), None)
            if dy is None:
                continue
            if node.requires_grad and node._parents is None:
                node.grad = dy if node.grad is None else node.grad + dy
            if node._vjp is not None:
                for parent, dparent in zip(node._parents, node._vjp(dy)):
                    if dparent is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + dparent
                    else:
                        grads[key] = dparent
        for node in order:
            node._parents = None
            node._vjp = None

    # ---- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _toposort(root):
    """Iterative post-order over the recorded graph, root first on return."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    order.reverse()
    return order


def _tracking(*tensors):
    return _grad_enabled.get() and any(t.requires_grad for t in tensors)


def make_op(data, parents, vjp):
    """Package-internal: wrap an op result, recording it when tracking."""
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor._wrap(data, parents=tuple(parents), vjp=vjp)
    return Tensor._wrap(data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return make_op(a.data + float(b), (a,), lambda dy: (dy,))
    _check_same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda dy: (dy, dy))


def sub(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return make_op(a.data - float(b), (a,), lambda dy: (dy,))
    _check_same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda dy: (dy, -dy))


def neg(a):
    return make_op(-a.data, (a,), lambda dy: (-dy,))


def mul(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return make_op(a.data * c, (a,), lambda dy: (dy * c,))
    _check_same_shape(a, b, "mul")
    out = a.data * b.data
    return make_op(out, (a, b), lambda dy: (dy * b.data, dy * a.data))


def div(a, b):
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        if b == 0:
            raise ContractError("division by zero scalar")
        inv = 1.0 / float(b)
        return make_op(a.data * inv, (a,), lambda dy: (dy * inv,))
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    if not np.isfinite(out).all():
        raise ContractError("div produced non-finite values")
    return make_op(
        out, (a, b),
        lambda dy: (dy / b.data, -dy * a.data / (b.data * b.data)),
    )


def power(a, p):
    """Elementwise a**p for a scalar exponent."""
    p = float(p)
    out = a.data ** p
    if not np.isfinite(out).all():
        raise ContractError(f"power(p={p}) produced non-finite values")
    return make_op(out, (a,), lambda dy: (dy * p * a.data ** (p - 1.0),))


# ---- broadcasting (explicit size-1 axes only) -------------------------------


def _check_broadcast(a, b, op):
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: ndims {a.ndim} and {b.ndim} differ; reshape explicitly")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} incompatible")


def _reduce_to(shape, dy):
    axes = tuple(i for i, (s, d) in enumerate(zip(shape, dy.shape)) if s == 1 and d != 1)
    if axes:
        dy = dy.sum(axis=axes, keepdims=True)
    return dy


def broadcast_mul(a, b):
    _check_broadcast(a, b, "broadcast_mul")
    out = a.data * b.data
    return make_op(
        out, (a, b),
        lambda dy: (_reduce_to(a.shape, dy * b.data), _reduce_to(b.shape, dy * a.data)),
    )


def broadcast_add(a, b):
    _check_broadcast(a, b, "broadcast_add")
    out = a.data + b.data
    return make_op(
        out, (a, b),
        lambda dy: (_reduce_to(a.shape, dy), _reduce_to(b.shape, dy)),
    )


# ---- shape ops ---------------------------------------------------------------


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return make_op(np.ascontiguousarray(out), (a,), lambda dy: (dy.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_op(out, (a,), lambda dy: (np.ascontiguousarray(dy.transpose(inv)),))


def swap_last2(a):
    return transpose(a, tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2))


def concat(tensors, axis):
    tensors = list(tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: shapes {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(dy):
        return tuple(np.ascontiguousarray(p) for p in np.split(dy, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(dy):
        dx = np.zeros_like(a.data)
        dx[idx] = dy
        return (dx,)

    return make_op(np.ascontiguousarray(a.data[idx]), (a,), vjp)


# ---- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)
    shape = a.shape

    def vjp(dy):
        if axis is None:
            return (np.broadcast_to(dy, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            dy = np.expand_dims(dy, ax)
        return (np.broadcast_to(dy, shape).copy(),)

    return make_op(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- transcendental ------------------------------------------------------------


def exp(a):
    out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise ContractError("exp overflowed to non-finite values")
    return make_op(out, (a,), lambda dy: (dy * out,))


def log(a):
    out = np.log(a.data)
    if not np.isfinite(out).all():
        raise ContractError("log of non-positive input")
    return make_op(out, (a,), lambda dy: (dy / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    if not np.isfinite(out).all():
        raise ContractError("sqrt of negative input")
    return make_op(out, (a,), lambda dy: (dy * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda dy: (dy * (1.0 - out * out),))


# ---- matmul / softmax -----------------------------------------------------------


def matmul(a, b):
    """a @ b with optional matching leading batch dims (or a 2D operand)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(dy):
        da = np.matmul(dy, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), dy)
        if da.ndim > a.ndim:
            da = da.sum(axis=tuple(range(da.ndim - a.ndim)))
        if db.ndim > b.ndim:
            db = db.sum(axis=tuple(range(db.ndim - b.ndim)))
        return (da, db)

    return make_op(out, (a, b), vjp)


def softmax(a, axis=-1):
    """Numerically stable softmax; each slice along ``axis`` sums to 1."""
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not np.isfinite(out).all():
        raise ContractError("softmax produced non-finite values")

    def vjp(dy):
        inner = (dy * out).sum(axis=axis, keepdims=True)
        return ((dy - inner) * out,)

    return make_op(out, (a,), vjp)


def rsqrt(a):
    """Elementwise 1/sqrt(a)."""
    root = np.sqrt(a.data)
    if not np.isfinite(root).all() or np.any(root == 0.0):
        raise ContractError("rsqrt of non-positive input")
    out = 1.0 / root

    def vjp(dy):
        return (dy * (-0.5) * out * out * out,)

    return make_op(out, (a,), vjp)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """tanh-approximation GELU (fused primitive)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(dy):
        dinner = 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        return (dy * (0.5 * (1.0 + th) + dinner),)

    return make_op(out, (a,), vjp)


# ---- verification oracle ----------------------------------------------------------


def grad_check(fn, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a pure scalar-valued function of one tensor. The
    relative error is |analytic - numeric| / max(1, |analytic|), maxed
    over coordinates.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    x = as_tensor(x)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y = fn(leaf)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ContractError("grad_check: fn must return a scalar tensor")
    y.backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()

    flat = leaf.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(Tensor._wrap(leaf.data.copy())).item()
            flat[i] = orig - eps
            fm = fn(Tensor._wrap(leaf.data.copy())).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(leaf.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)
