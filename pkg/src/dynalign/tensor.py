"""Dense tensors with reverse-mode automatic differentiation.

Storage is 32-bit. Reductions, products and normalisations compute in
64-bit and round the result back to the storage dtype; elementwise and
structural ops work in the storage dtype directly. Inside :func:`check_mode` the storage dtype is
64-bit so finite-difference comparisons are not swamped by rounding.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "LossShapeError",
    "check_mode",
    "no_grad",
    "storage_dtype",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "stack",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "exp",
    "log",
    "embedding",
    "cosine",
    "attention",
]

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def storage_dtype():
    return np.float64 if _get("check", False) else np.float32


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def check_mode():
    """Store every op result in 64-bit (for gradient checks)."""
    prev = _get("check", False)
    _state.check = True
    try:
        yield
    finally:
        _state.check = prev


@contextlib.contextmanager
def no_grad():
    prev = _get("grad", True)
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LossShapeError(ValueError):
    pass


# Observers for relu preactivations; used by gradcheck to skip kinks.
_relu_watchers: list[list] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or arr.dtype != storage_dtype():
            arr = arr.astype(storage_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _f64(t):
    return t.data.astype(np.float64, copy=False)


def _raw(t):
    return t.data


def _make(value, parents, backward, op):
    out = Tensor(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(_raw(a) + _raw(b), (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(_raw(a) - _raw(b), (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    x, y = _raw(a), _raw(b)

    def backward(g):
        return _unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)

    return _make(x * y, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    x, y = _raw(a), _raw(b)

    def backward(g):
        return _unbroadcast(g / y, a.shape), _unbroadcast(-g * x / (y * y), b.shape)

    return _make(x / y, (a, b), backward, "div")


def exp(a):
    y = np.exp(_raw(a))
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    x = _raw(a)
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a):
    x = _raw(a)
    for w in _relu_watchers:
        w.append(x.copy())
    mask = x > 0
    return _make(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = _raw(a)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), backward, "gelu")


# -- structural ------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    try:
        y = _raw(a).reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes {axes}")
    inv = tuple(np.argsort(axes))
    return _make(_raw(a).transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    x = _raw(a)
    try:
        y = x[idx]
    except IndexError as exc:
        raise ShapeError("getitem", a.shape, detail=str(exc)) from None

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        out = np.zeros(x.shape)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(y, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    arrays = [_raw(t) for t in tensors]
    try:
        y = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        y = np.stack([_raw(t) for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in tensors)) from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(y, tuple(tensors), backward, "stack")


def embedding(table, indices):
    """Rows of ``table`` selected by integer ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError("embedding", table.shape, idx.shape, detail="index out of range")
    return getitem(table, idx)


# -- reductions ------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    x = _f64(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    x = _f64(a)
    shape = a.shape
    n = x.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make(x.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    x, y = _f64(a), _f64(b)
    try:
        out = np.matmul(x, y)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


# -- normalisation / probabilistic -----------------------------------------

def layer_norm(a, gain, bias, eps=1e-5):
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = _f64(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv, bv = _f64(gain), _f64(bias)

    def backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gv + bv, (a, gain, bias), backward, "layer_norm")


def softmax(a, axis=-1):
    x = _f64(a)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    x = _f64(a)
    z = x - x.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward, "log_softmax")


class DegenerateFeatureError(ValueError):
    """A feature vector has (near) zero norm; its direction is undefined."""


def cosine(a, b, axis=-1, min_norm=1e-12):
    """Cosine similarity along ``axis`` with broadcasting over the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError("cosine", a.shape, b.shape)
    _broadcast_shape("cosine", a, b)
    x, y = _f64(a), _f64(b)
    nx = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    ny = np.sqrt((y * y).sum(axis=axis, keepdims=True))
    if nx.min(initial=np.inf) < min_norm or ny.min(initial=np.inf) < min_norm:
        raise DegenerateFeatureError("feature norm below %g" % min_norm)
    xh, yh = x / nx, y / ny
    c = (xh * yh).sum(axis=axis, keepdims=True)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (yh - c * xh) / nx
        gb = g * (xh - c * yh) / ny
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.squeeze(c, axis=axis), (a, b), backward, "cosine")


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is an additive array broadcastable to the score shape (0 for
    visible keys, a large negative value for hidden ones).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask, dtype=np.float64))
    return matmul(softmax(scores, axis=-1), v)


# -- reverse pass ----------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(loss, params=None):
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict mapping each leaf tensor with ``requires_grad`` (or each of
    ``params`` when given) to an array of the same shape. Parameters not on
    the graph get a zero gradient.
    """
    if loss.data.size != 1:
        raise LossShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    leaves[id(node)] = (node, g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    dtype = storage_dtype()
    if params is None:
        return {t: np.asarray(g, dtype=dtype).reshape(t.shape) for t, g in leaves.values()}
    out = {}
    for p in params:
        hit = leaves.get(id(p))
        out[p] = (np.asarray(hit[1], dtype=dtype).reshape(p.shape)
                  if hit is not None else np.zeros(p.shape, dtype=dtype))
    return out
