"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded in execution order, which is already a topological
order. :meth:`Tape.gradient` walks the records backwards once.

Broadcasting is limited to exact shape matches and scalar-vs-tensor; the
row-wise products the models need have dedicated ops (``row_scale``,
``outer_add``).
"""

import math
import threading

import numpy as np

from . import _kernels
from .errors import DomainError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise ShapeError("tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Records operations while active; use as a context manager.

    A tape belongs to the thread that entered it. Distinct tapes share no state.
    """

    def __init__(self):
        self.records = []
        self._outputs = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out, parents, backward):
        self.records.append((out, parents, backward))
        self._outputs.add(id(out))

    def gradient(self, loss, wrt):
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Tensors the loss does not depend on get zeros. Each returned array is
        also stored on the tensor's ``grad`` attribute.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        wrt = list(wrt)
        if id(loss) not in self._outputs and not any(loss is w for w in wrt):
            raise ValueError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for p, gp in zip(parents, backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = gp if prev is None else prev + gp
        result = []
        for w in wrt:
            g = grads.get(id(w))
            g = np.zeros_like(w.data) if g is None else np.asarray(g).reshape(w.shape)
            w.grad = g
            result.append(g)
        return result


def backward(tape, loss, wrt):
    """Functional alias of :meth:`Tape.gradient`."""
    return tape.gradient(loss, wrt)


def no_grad():
    """Context in which nothing is recorded (an inactive, empty tape)."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise DomainError("operation produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, parents, backward)
    return out


def _broadcast_pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b, a.shape
    if a.data.ndim == 0 or (a.data.size == 1 and a.data.ndim <= 1):
        return a, b, b.shape
    if b.data.ndim == 0 or (b.data.size == 1 and b.data.ndim <= 1):
        return a, b, a.shape
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b):
    a, b, _ = _broadcast_pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b, _ = _broadcast_pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b, _ = _broadcast_pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def div(a, b):
    a, b, _ = _broadcast_pair(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), back)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data > 0
    d = np.where(pos, 1.0, slope)
    return _result(x.data * d, (x,), lambda g: (g * d,))


def elu(x, alpha=1.0):
    x = as_tensor(x)
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, neg)
    d = np.where(pos, 1.0, neg + alpha)
    return _result(y, (x,), lambda g: (g * d,))


_ELEMENTWISE = {
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "mul": mul,
    "add": add,
    "leaky_relu": leaky_relu,
    "elu": elu,
}


def elementwise(kind, *inputs, **kwargs):
    """Dispatch ``kind`` (tanh, leaky_relu, exp, log, mul, add, elu) by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose needs a 2-D tensor")
    return _result(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),))


def sum_(x, axis=None):
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(y, (x,), back)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum_(x, axis), 1.0 / n)


def max_(x, axis=0):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    y = np.squeeze(y, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(y, (x,), back)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def masked_softmax(x, mask):
    """Row softmax restricted to ``mask``; masked-out entries are exactly 0."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape or x.data.ndim != 2:
        raise ShapeError(f"mask shape {mask.shape} does not match {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise ShapeError("every row needs at least one unmasked entry")
    y = _kernels.masked_softmax(np.ascontiguousarray(x.data), mask)
    return _result(y, (x,), lambda g: (_kernels.softmax_rows_backward(y, np.ascontiguousarray(g)),))


def cross_entropy(logits, label):
    """Negative log-likelihood of integer ``label`` under softmax(logits)."""
    logits = as_tensor(logits)
    z = logits.data.reshape(-1)
    if not 0 <= label < z.size:
        raise ValueError(f"label {label} out of range for {z.size} classes")
    m = z.max()
    lse = m + math.log(np.sum(np.exp(z - m)))
    p = np.exp(z - lse)

    def back(g):
        d = p.copy()
        d[label] -= 1.0
        return ((g * d).reshape(logits.shape),)

    return _result(lse - z[label], (logits,), back)


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, tuple(tensors), back)


def take_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), back)


def cols(x, start, stop):
    x = as_tensor(x)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop], (x,), back)


def row_scale(x, v):
    """Multiply row n of ``x`` (N x F) by ``v[n]`` (``v`` of shape N or N x 1)."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.size != x.shape[0]:
        raise ShapeError(f"cannot scale rows of {x.shape} by {v.shape}")
    col = v.data.reshape(-1, 1)

    def back(g):
        return g * col, np.sum(g * x.data, axis=1).reshape(v.shape)

    return _result(x.data * col, (x, v), back)


def outer_add(s, t):
    """``out[u, v] = s[u] + t[v]`` for column vectors ``s`` (N x 1) and ``t`` (M x 1)."""
    s, t = as_tensor(s), as_tensor(t)
    if s.data.ndim != 2 or t.data.ndim != 2 or s.shape[1] != 1 or t.shape[1] != 1:
        raise ShapeError(f"outer_add needs column vectors, got {s.shape} and {t.shape}")

    def back(g):
        return g.sum(axis=1, keepdims=True), g.sum(axis=0).reshape(-1, 1)

    return _result(s.data + t.data.T, (s, t), back)


def dropout(x, rate, rng, training=True):
    """Inverted dropout with a mask drawn from ``rng``; identity outside training."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# verification oracle
# --------------------------------------------------------------------------


def finite_diff_check(f, params, h=1e-5, return_details=False):
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor computed from
    ``params`` (tensors with ``requires_grad``). Each coordinate's error is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise DomainError("f is not finite at params")
    analytic = tape.gradient(loss, params) if loss.requires_grad else [
        np.zeros_like(p.data) for p in params
    ]

    def value():
        with no_grad():
            v = f().item()
        if not math.isfinite(v):
            raise DomainError("f is not finite near params")
        return v

    worst = 0.0
    per_param = []
    for p, ga in zip(params, analytic):
        flat = p.data.flat
        gflat = ga.reshape(-1)
        p_worst = 0.0
        for j in range(p.data.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value()
            flat[j] = orig - h
            fm = value()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[j] - numeric) / max(1e-8, abs(numeric))
            p_worst = max(p_worst, err)
        per_param.append(p_worst)
        worst = max(worst, p_worst)
    if return_details:
        return worst, per_param
    return worst
