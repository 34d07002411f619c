"""Dense tensors with tape-free reverse-mode autodiff on top of numpy.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks the graph in reverse topological order and
accumulates (``+=``) into every tensor that requires a gradient.

Only the operations needed by the adapter layers, the toy transformer and
the losses are provided.  Broadcasting follows numpy; gradients of broadcast
operands are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import enum
import os

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, PrecisionError

__all__ = [
    "Precision", "Tensor", "as_tensor", "backward", "concat", "cross_entropy",
    "dropout", "embedding", "finite_diff_check", "get_precision", "grad_check",
    "is_grad_enabled", "log_softmax", "matmul", "no_grad", "precision",
    "set_precision", "silu", "softmax", "stack", "where",
]


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self):
        return np.dtype(np.float32) if self is Precision.SINGLE else np.dtype(np.float64)

    @classmethod
    def parse(cls, value):
        if isinstance(value, Precision):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"precision must be 'single' or 'double', got {value!r}") from None

    @classmethod
    def from_dtype(cls, dtype):
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.SINGLE
        if dtype == np.float64:
            return cls.DOUBLE
        raise PrecisionError(f"unsupported dtype {dtype}")


_precision = None  # resolved from OMOE_PRECISION on first use
_grad_enabled = True


def get_precision():
    global _precision
    if _precision is None:
        raw = os.environ.get("OMOE_PRECISION", "double")
        try:
            _precision = Precision.parse(raw)
        except ValueError as exc:
            raise ConfigError("OMOE_PRECISION", str(exc)) from None
    return _precision


def set_precision(mode):
    global _precision
    _precision = Precision.parse(mode)


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the precision used for new tensors."""
    global _precision
    old, _precision = get_precision(), Precision.parse(mode)
    try:
        yield _precision
    finally:
        _precision = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = get_precision().dtype if dtype is None else np.dtype(dtype)
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self):
        return Precision.from_dtype(self.data.dtype)

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other, self))

    def __radd__(self, other):
        return _add(_lift(other, self), self)

    def __sub__(self, other):
        return _sub(self, _lift(other, self))

    def __rsub__(self, other):
        return _sub(_lift(other, self), self)

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    def __rmul__(self, other):
        return _mul(_lift(other, self), self)

    def __truediv__(self, other):
        return _div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        p = float(exponent)
        return _result(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.data.shape
        fancy = _is_fancy(idx)

        def grad_fn(g):
            out = np.zeros(shape, dtype=g.dtype)
            if fancy:
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return (out,)

        return _result(self.data[idx], (self,), grad_fn)

    # -- reductions and shape ------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a, b):
        return _result(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise ---------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return _result(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _result(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return _result(y, (self,), lambda g: (g * 0.5 / y,))

    def tanh(self):
        y = np.tanh(self.data)
        return _result(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self):
        y = _sigmoid(self.data)
        return _result(y, (self,), lambda g: (g * y * (1.0 - y),))

    def relu(self):
        x = self.data
        return _result(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))


# -- graph plumbing ----------------------------------------------------

def _result(data, parents, grad_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _lift(x, like):
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise PrecisionError(f"mixed precision in one graph: {x.data.dtype} vs {like.data.dtype}")
        return x
    return Tensor(np.asarray(x), dtype=like.data.dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _same_precision(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise PrecisionError(f"mixed precision in one graph: {dt} vs {t.data.dtype}")


def _is_fancy(idx):
    if isinstance(idx, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in idx)
    return isinstance(idx, (np.ndarray, list))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add(a, b):
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _sub(a, b):
    sa, sb = a.data.shape, b.data.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def _mul(a, b):
    x, y = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * y, x.shape) if a.requires_grad else None
        gb = _unbroadcast(g * x, y.shape) if b.requires_grad else None
        return ga, gb

    return _result(x * y, (a, b), grad_fn)


def _div(a, b):
    x, y = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g / y, x.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * x / (y * y), y.shape) if b.requires_grad else None
        return ga, gb

    return _result(x / y, (a, b), grad_fn)


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- operations --------------------------------------------------------

def matmul(a, b):
    """Matrix product ``a @ b`` with numpy batching rules.

    1-D operands are promoted to a row (left) or column (right) and the
    promoted axis is dropped from the result, as in numpy.
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_precision(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim == 1:
        return matmul(a.reshape(1, -1), b).reshape(b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return matmul(a, b.reshape(-1, 1)).reshape(a.shape[:-1])
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        # stacked rows times one matrix: reduce the weight gradient in a single GEMM
        def grad_fn(g):
            ga = g @ y.T if a.requires_grad else None
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        return _result(x @ y, (a, b), grad_fn)

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return _result(x @ y, (a, b), grad_fn)


def softmax(x, axis=-1):
    """Max-shifted softmax; NaN inputs raise :class:`NumericError`."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), grad_fn)


def silu(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a boolean array, not differentiated) else ``b``."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    a, b = as_tensor(a), as_tensor(b)
    _same_precision(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(cond, g, zero), sa) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, zero, g), sb) if b.requires_grad else None
        return ga, gb

    return _result(np.where(cond, a.data, b.data), (a, b), grad_fn)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    _same_precision(*tensors)
    n = len(tensors)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    _same_precision(*tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"token id out of range for embedding of shape {weight.shape}")
    return weight[ids]


def dropout(x, p, rng, training=True):
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * Tensor(mask, dtype=x.dtype)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    if flat.shape[0] == 0:
        raise ContractError("cross_entropy needs at least one target")
    logp = log_softmax(flat, axis=-1)
    picked = logp[np.arange(targets.shape[0]), targets]
    return -picked.mean()


# -- backward ----------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``.

    Leaf gradients accumulate across calls; interior gradients are reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.dtype != parent.data.dtype:
                g = g.astype(parent.data.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g


# -- gradient checking -------------------------------------------------

def finite_diff_check(f, x, eps=1e-6):
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps the tensor ``x`` to a scalar tensor.  The error per coordinate
    is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if x.dtype != np.float64:
        raise PrecisionError("finite-difference checks require double precision")
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    return grad_check(lambda: f(x), [x], eps)


def grad_check(loss_fn, params, eps=1e-6):
    """Like :func:`finite_diff_check` but over several parameter tensors.

    ``loss_fn`` takes no arguments and closes over ``params``.
    """
    params = list(params)
    saved = [p.grad for p in params]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    try:
        backward(loss_fn())
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        worst = 0.0
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = loss_fn().item()
                    flat[i] = orig - eps
                    down = loss_fn().item()
                    flat[i] = orig
                    c = (up - down) / (2.0 * eps)
                    ai = a.reshape(-1)[i]
                    worst = max(worst, abs(ai - c) / (abs(ai) + abs(c) + 1e-12))
        return worst
    finally:
        for p, g, fl in zip(params, saved, flags):
            p.grad = g
            p.requires_grad = fl
