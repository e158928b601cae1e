"""Dense tensors with reverse-mode gradient accumulation.

Every differentiable op is a function of numpy arrays that records a
closure computing the vector-Jacobian product. Calling :func:`backward`
on a scalar walks the recorded graph in reverse topological order.

Broadcasting is restricted to the trailing-dimension rule: two operands
are compatible when their shapes are equal or one shape is a suffix of
the other (a 0-d scalar is a suffix of everything). Anything else needs
an explicit :func:`reshape` or :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- conveniences -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data, parents, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    # gradients are never mutated in place, so the first one can be stored
    # without a copy even when it aliases another node's gradient
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _check_suffix(op, a_shape, b_shape):
    if a_shape == b_shape:
        return
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(
            f"{op}: shapes {a_shape} and {b_shape} are not trailing-dim compatible"
        )


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("add", a.shape, b.shape)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("sub", a.shape, b.shape)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("mul", a.shape, b.shape)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_suffix("div", a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)

    return _make(out, (a, b), bw, "div")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise unary ----------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2 * g * a.data), "square")


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1 - out)), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1 - out * out)), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner))

    return _make(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: _accum(a, g * _np_sigmoid(x)), "softplus")


def _np_sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two dims.

    The leading (batch) dims of ``b`` must be a suffix of those of ``a``
    or vice versa, e.g. (B, T, D) @ (D, E) or (B, H, T, d) @ (B, H, d, S).
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_suffix("matmul", a.shape[:-2], b.shape[:-2])

    flat = b.ndim == 2 and a.ndim > 2  # (..., D) @ (D, E): fold leading dims into rows

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T if flat else g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if flat:
                _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make(out, (a, b), bw, "matmul")


# -- reductions -----------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def softmax(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    s = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(s, axis=axis)

    def bw(g):
        _accum(a, np.expand_dims(g, axis) * np.exp(x - s))

    return _make(out, (a,), bw, "logsumexp")


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the only way past the suffix rule."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        extra = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(extra))) if extra else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        _accum(a, g)

    return _make(out, (a,), bw, "broadcast_to")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), bw, "concat")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.asarray(out), (a,), bw, "getitem")


def gather(a: Tensor, index, axis=-1) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward."""
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        ax = axis % a.ndim
        grids = list(np.indices(index.shape, sparse=True))
        grids[ax] = index
        np.add.at(full, tuple(grids), g)
        _accum(a, full)

    return _make(out, (a,), bw, "gather")


def masked_fill(a: Tensor, mask, value) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    _check_suffix("masked_fill", a.shape, mask.shape)
    if mask.ndim > a.ndim:
        raise ShapeError(f"masked_fill: mask {mask.shape} has more dims than input {a.shape}")
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: _accum(a, np.where(mask, 0, g)), "masked_fill")


# -- fused normalizations -------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        _accum(gamma, g * xhat)
        _accum(beta, g)
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                            - xhat * (gx * xhat).sum(-1, keepdims=True))
            _accum(x, dx)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x: Tensor, eps=1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(-1, keepdims=True) + eps)
    out = xd / norm

    def bw(g):
        _accum(x, (g - out * (g * out).sum(-1, keepdims=True)) / norm)

    return _make(out, (x,), bw, "l2_normalize")


# -- graph traversal ------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``root``.

    Leaf grads accumulate across calls; zero them between steps.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward: root does not require grad")
    order = topological_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None  # intermediates only; leaves have no _backward
    for node in order:
        # leaf grads may alias read-only broadcasts; give each leaf its own array
        if node.grad is not None and not (node.grad.flags.writeable and node.grad.flags.owndata):
            node.grad = np.array(node.grad)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "square": square, "sigmoid": sigmoid,
    "tanh": tanh, "gelu": gelu, "softplus": softplus, "matmul": matmul,
    "sum": sum_, "mean": mean, "softmax": softmax, "log_softmax": log_softmax,
    "logsumexp": logsumexp, "reshape": reshape, "transpose": transpose,
    "broadcast_to": broadcast_to, "gather": gather, "masked_fill": masked_fill,
    "layer_norm": layer_norm, "l2_normalize": l2_normalize,
    "concat": concat, "getitem": getitem,
}


def forward_op(op: str, inputs, **kwargs) -> Tensor:
    """Apply primitive ``op`` by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)
