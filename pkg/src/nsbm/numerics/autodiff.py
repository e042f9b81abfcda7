"""Small reverse-mode automatic differentiation engine on top of numpy.

Every value is a float64 array wrapped in :class:`Tensor`. Operations record
their parents and a closure that pushes the upstream gradient back to them;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.
"""

import math

import numpy as np
import scipy.sparse as sp

EPS = 1e-12


class ShapeError(ValueError):
    """Raised when two operands cannot be combined."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcasting added or stretched
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op=""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = None
        self._op = _op

    # -- basic info -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flattened values."""
        return self.data.ravel()

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def zero_grad(self):
        self.grad = None

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        req = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
        if req:
            out._backward = backward
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: terminal node must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def power(a, exponent):
    a = _wrap(a)
    p = float(exponent)
    ad = a.data
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return Tensor._make(out, (a, b), backward, "matmul")


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1] if a.ndim != 3 else (0, 2, 1)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index):
    a = _wrap(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward, "getitem")


def take_rows(a, idx):
    """Gather rows ``a[idx]`` for an integer index array of any shape."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        flat = idx.ravel()
        rows = g.reshape(flat.size, -1)
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(shape[0], flat.size))
        return ((scatter @ rows).reshape(shape),)

    return Tensor._make(a.data[idx], (a,), backward, "take_rows")


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def exact_sum(a, axis=None):
    """Correctly rounded sum (``math.fsum``): the result does not depend on element order."""
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        out = np.array(math.fsum(a.data.ravel()))
    else:
        out = np.apply_along_axis(math.fsum, axis, a.data) if a.data.size else a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(out, (a,), backward, "exact_sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def log(a):
    """Natural log; refuses non-positive input (callers add ``EPS`` first)."""
    a = _wrap(a)
    ad = a.data
    if np.any(ad <= 0) or np.any(np.isnan(ad)):
        bad = float(ad[np.logical_or(ad <= 0, np.isnan(ad))].ravel()[0])
        raise DomainError(f"log: non-positive input {bad!r} in operand of shape {a.shape}")
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def safe_log(a):
    """``ln(a + 1e-12)``, the guarded log used by every loss."""
    return log(add(a, EPS))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(a, mask=None):
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable) marks entries that take part; masked-out
    entries get probability exactly 0.
    """
    a = _wrap(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shift = np.max(x, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(x - shift)
    s = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._make(out, (a,), backward, "softmax")


def l2_norm(a, axis=-1, keepdims=False):
    a = _wrap(a)
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.divide(ad, n, out=np.zeros_like(ad), where=n > 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (a,), backward, "l2_norm")


def cosine_similarity(a, b, axis=-1):
    """Cosine of the angle between ``a`` and ``b`` along ``axis``; 0 when either is zero."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / denom, 0.0)

    def backward(g):
        g = np.expand_dims(g, axis)
        inv_a = np.where(ok, 1.0 / np.where(ok, na, 1.0), 0.0)
        inv_b = np.where(ok, 1.0 / np.where(ok, nb, 1.0), 0.0)
        ga = g * (bd * inv_a * inv_b - cos * ad * inv_a * inv_a)
        gb = g * (ad * inv_a * inv_b - cos * bd * inv_b * inv_b)
        return ga, gb

    return Tensor._make(np.squeeze(cos, axis=axis), (a, b), backward, "cosine_similarity")


def clip_below(a, threshold):
    """Zero every entry strictly below ``threshold``; the rest pass through."""
    a = _wrap(a)
    keep = a.data >= threshold
    return Tensor._make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "clip_below")
