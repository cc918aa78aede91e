"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable operation returns a new :class:`Tensor` holding a
reference to its inputs and a closure mapping the output gradient to the
input gradients.  :func:`backward` walks that graph in reverse topological
order.  The graph built by one forward pass plays the role of the tape; it
is private to the thread that built it.

Arrays follow numpy broadcasting rules, so all ops work on batched inputs
(``[B, L, d]`` and so on) as well as on plain matrices.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Rng",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "embedding_lookup",
    "gather_rows",
    "concat",
    "tensor_sum",
    "mean",
    "reshape",
    "transpose",
    "take_slice",
]

# Set to False to skip the per-op NaN/Inf scan (about 5% faster training).
CHECK_FINITE = True

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

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

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


class Rng:
    """Seeded random stream built on numpy's counter-based Philox generator.

    ``child(key)`` derives an independent stream, so e.g. dropout masks and
    batch shuffling never perturb each other.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(key)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key):
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    def uniform(self, low, high, size, dtype=np.float64):
        return self._gen.uniform(low, high, size).astype(dtype, copy=False)

    def random(self, size):
        return self._gen.random(size)

    def normal(self, size):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the dtype of the other operand (NEP 50)
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr, opname):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError(f"{opname} produced a non-finite value")


def _make(data, parents, backward_fn, opname):
    """Wrap an op result; attach graph links only when a parent needs grad."""
    _check_finite(data, opname)
    out = Tensor(data)
    if grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {np.shape(a)} and {np.shape(b)} do not broadcast"
        ) from None


# ---------------------------------------------------------------- elementwise


def _wants(x):
    return isinstance(x, Tensor) and x.requires_grad


def add(a, b):
    a_, b_ = _data(a), _data(b)
    _broadcast_shape(a_, b_, "add")
    sa, sb = np.shape(a_), np.shape(b_)

    def bw(g):
        return (
            _unbroadcast(g, sa) if _wants(a) else None,
            _unbroadcast(g, sb) if _wants(b) else None,
        )

    return _make(a_ + b_, (a, b), bw, "add")


def sub(a, b):
    a_, b_ = _data(a), _data(b)
    _broadcast_shape(a_, b_, "sub")
    sa, sb = np.shape(a_), np.shape(b_)

    def bw(g):
        return (
            _unbroadcast(g, sa) if _wants(a) else None,
            _unbroadcast(-g, sb) if _wants(b) else None,
        )

    return _make(a_ - b_, (a, b), bw, "sub")


def mul(a, b):
    a_, b_ = _data(a), _data(b)
    _broadcast_shape(a_, b_, "mul")
    sa, sb = np.shape(a_), np.shape(b_)

    def bw(g):
        return (
            _unbroadcast(g * b_, sa) if _wants(a) else None,
            _unbroadcast(g * a_, sb) if _wants(b) else None,
        )

    return _make(a_ * b_, (a, b), bw, "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,), "relu")


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ------------------------------------------------------------------- linear


def matmul(a, b):
    """Matrix product over the last two axes, batch axes broadcast."""
    a_, b_ = _data(a), _data(b)
    if a_.ndim < 2 or b_.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a_.shape} and {b_.shape}")
    if a_.shape[-1] != b_.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a_.shape} @ {b_.shape}")
    try:
        out = a_ @ b_
    except ValueError:
        raise DimensionError(f"matmul batch axes differ: {a_.shape} @ {b_.shape}") from None
    sa, sb = a_.shape, b_.shape

    def bw(g):
        ga = gb = None
        if _wants(a):
            ga = _unbroadcast(g @ np.swapaxes(b_, -1, -2), sa)
        if _wants(b):
            gb = _unbroadcast(np.swapaxes(a_, -1, -2) @ g, sb)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# --------------------------------------------------------------- reductions


def tensor_sum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis, keepdims), 1.0 / float(count))


# ------------------------------------------------------------------ shaping


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take_slice(x, index):
    """``x[index]``; repeated positions accumulate gradient."""
    shape, dtype = x.shape, x.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors, axis=-1):
    arrays = [_data(t) for t in tensors]
    lead = {a.shape[:axis % a.ndim] + a.shape[axis % a.ndim + 1:] for a in arrays}
    if len(lead) != 1:
        raise DimensionError(f"concat: shapes {[a.shape for a in arrays]} differ off axis {axis}")
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate(arrays, axis=axis), tuple(tensors), bw, "concat")


def gather_rows(x, index):
    """Per-batch row gather: ``out[b, t] = x[b, index[b, t]]``.

    ``x`` is ``[B, n, d]`` and ``index`` an integer array ``[B, L]``.
    """
    index = np.asarray(index)
    if index.ndim != 2 or x.ndim != 3 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"gather_rows: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])[:, None]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (np.broadcast_to(rows, index.shape), index), g)
        return (full,)

    return _make(x.data[rows, index], (x,), bw, "gather_rows")


def embedding_lookup(table, ids):
    """Row gather from ``table [V, d]``; ``ids`` may have any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    n_rows = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n_rows)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} outside [0, {n_rows})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding_lookup")


# ------------------------------------------------------- normalised outputs


def softmax(x, axis=-1):
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    y = xhat * gamma.data + beta.data

    def bw(g):
        gb = g.reshape(-1, d).sum(axis=0)
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gh = g * gamma.data
        gx = inv_std * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(y, (x, gamma, beta), bw, "layer_norm")


def dropout(x, p, training, rng=None):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    from .errors import ConfigError

    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, keep)


# ----------------------------------------------------------------- backward


def _topological_order(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if isinstance(parent, Tensor) and parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call.  Leaves
    not reached keep whatever ``.grad`` they had, so zero them beforehand.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
