"""Dense float tensors with a reverse-mode gradient tape.

Everything downstream (projection geometry, scan kernels, diffusion,
conditioning) runs on this one carrier type. Default precision is float64;
float32 is opt-in and used only by the scan benchmark.

Broadcasting rule (the only one supported): shapes are aligned on their
trailing dimensions, and each aligned pair must be equal or contain a 1;
missing leading dimensions broadcast. Anything else raises ShapeError.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's dimension contract."""


class DomainError(ValueError):
    """Input values outside an operation's numeric domain."""


class ContractError(ValueError):
    """A precondition unrelated to shapes or numeric domain was violated."""


# --- tape machinery -------------------------------------------------------

_tls = threading.local()


def _state():
    if not hasattr(_tls, "tapes"):
        _tls.tapes = []
        _tls.grad_enabled = True
    return _tls


class TapeEntry:
    """One recorded operation: inputs, output, and a backward rule.

    backward_fn maps the gradient w.r.t. the output to a tuple of gradients
    aligned with `inputs` (None for inputs that need no gradient).
    """

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered operation record; append order is a topological order."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False


class no_grad:
    """Context manager that suspends recording (and grad propagation)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def active_tape():
    st = _state()
    if st.grad_enabled and st.tapes:
        return st.tapes[-1]
    return None


def record_op(output, inputs, backward_fn):
    """Register a custom differentiable op on the active tape.

    Public hook for ops defined outside this module (convolutions, the scan
    recurrence). No-op when no tape is active or no input requires grad.
    """
    tape = active_tape()
    if tape is None:
        return output
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    # weak link: tensors must not keep the recording alive (no ref cycles)
    output.tape = weakref.ref(tape)
    tape.entries.append(TapeEntry(inputs, output, backward_fn))
    return output


# --- tensor ---------------------------------------------------------------

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    # -- introspection --
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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- method sugar --
    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def flip(self, axis):
        return flip(self, axis)

    def exp(self):
        return map_unary(self, "exp")

    def sigmoid(self):
        return map_unary(self, "sigmoid")

    def softplus(self):
        return map_unary(self, "softplus")

    def silu(self):
        return map_unary(self, "silu")

    def sqrt(self):
        return map_unary(self, "sqrt")

    def reciprocal(self):
        return map_unary(self, "reciprocal")

    def backward(self):
        backward(self)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --- broadcasting ---------------------------------------------------------


def _check_broadcast(sa, sb):
    """Trailing-dimension alignment; each aligned pair equal or containing 1."""
    for i in range(1, min(len(sa), len(sb)) + 1):
        a, b = sa[-i], sb[-i]
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --- elementwise ops ------------------------------------------------------


def _sigmoid(x):
    # exp overflow at the far negative tail still yields the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def _silu_grad(x, y):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_UNARY = {
    "exp": (np.exp, lambda x, y: y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "silu": (lambda x: x * _sigmoid(x), _silu_grad),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
    "reciprocal": (np.reciprocal, lambda x, y: -y * y),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
}

UNARY_NAMES = tuple(_UNARY)


def map_unary(x, f):
    if f not in _UNARY:
        raise ContractError(f"unknown unary function {f!r}; known: {sorted(_UNARY)}")
    if f == "reciprocal" and np.any(x.data == 0):
        raise DomainError("reciprocal of zero entry")
    if f == "sqrt" and np.any(x.data < 0):
        raise DomainError("sqrt of negative entry")
    fwd, dfn = _UNARY[f]
    xd = x.data
    out = Tensor(fwd(xd))

    def bwd(g):
        return (g * dfn(xd, out.data),)

    return record_op(out, (x,), bwd)


def exp(x):
    return map_unary(x, "exp")


def sigmoid(x):
    return map_unary(x, "sigmoid")


def softplus(x):
    return map_unary(x, "softplus")


def silu(x):
    return map_unary(x, "silu")


def neg(x):
    return map_unary(x, "neg")


def reciprocal(x):
    return map_unary(x, "reciprocal")


def sqrt(x):
    return map_unary(x, "sqrt")


_BINARY = {
    "add": (np.add, lambda a, b, g: (g, g)),
    "sub": (np.subtract, lambda a, b, g: (g, -g)),
    "mul": (np.multiply, lambda a, b, g: (g * b, g * a)),
    "div": (np.divide, lambda a, b, g: (g / b, -g * a / (b * b))),
}

BINARY_NAMES = tuple(_BINARY)


def combine_binary(a, b, f):
    if f not in _BINARY:
        raise ContractError(f"unknown binary function {f!r}; known: {sorted(_BINARY)}")
    _check_broadcast(a.shape, b.shape)
    fwd, dfn = _BINARY[f]
    ad, bd = a.data, b.data
    out = Tensor(fwd(ad, bd))
    sa, sb = a.shape, b.shape

    def bwd(g):
        ga, gb = dfn(ad, bd, g)
        return (_unbroadcast(ga, sa), _unbroadcast(gb, sb))

    return record_op(out, (a, b), bwd)


def add(a, b):
    return combine_binary(a, b, "add")


def sub(a, b):
    return combine_binary(a, b, "sub")


def mul(a, b):
    return combine_binary(a, b, "mul")


def div(a, b):
    return combine_binary(a, b, "div")


# --- matmul and reductions ------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k]@[k,n]; got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def bwd(g):
        return (g @ bd.T, ad.T @ g)

    return record_op(out, (a, b), bwd)


def reduce(x, op, axes=None):
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op!r}; known: ['mean', 'sum']")
    if axes is None:
        ax = tuple(range(x.ndim))
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        for a in ax:
            if not -x.ndim <= a < x.ndim:
                raise ShapeError(f"axis {a} out of range for shape {x.shape}")
        ax = tuple(a % x.ndim for a in ax)
    xd = x.data
    if op == "sum":
        out = Tensor(xd.sum(axis=ax))
    else:
        out = Tensor(xd.mean(axis=ax))
    count = 1
    for a in ax:
        count *= x.shape[a]
    in_shape = x.shape

    def bwd(g):
        # re-insert reduced axes then broadcast back
        gshape = [1 if i in ax else in_shape[i] for i in range(len(in_shape))]
        g = g.reshape(gshape)
        g = np.broadcast_to(g, in_shape).copy()
        if op == "mean":
            g /= count
        return (g,)

    return record_op(out, (x,), bwd)


def sum_(x, axes=None):
    return reduce(x, "sum", axes)


def mean_(x, axes=None):
    return reduce(x, "mean", axes)


# --- shape ops ------------------------------------------------------------


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return record_op(out, (x,), bwd)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op(out, (x,), bwd)


def flip(x, axis):
    out = Tensor(np.flip(x.data, axis=axis).copy())

    def bwd(g):
        return (np.flip(g, axis=axis).copy(),)

    return record_op(out, (x,), bwd)


def take(x, key):
    out = Tensor(x.data[key].copy())
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[key] += g
        return (gx,)

    return record_op(out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        grads = []
        off = 0
        for n in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + n)
            grads.append(g[tuple(idx)].copy())
            off += n
        return tuple(grads)

    return record_op(out, tuple(tensors), bwd)


def gather_rows(x, idx):
    """Row lookup x[idx] for integer index vectors (embedding tables)."""
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return record_op(out, (x,), bwd)


# --- backward pass --------------------------------------------------------


def backward(root):
    """Populate .grad of every tensor reachable from `root` (a scalar)."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape() if root.tape is not None else active_tape()
    if tape is None or not tape.entries:
        raise ContractError("backward called with no recorded operations")
    root.grad = np.ones_like(root.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gi.copy() if gi.base is not None or gi is g else gi
            else:
                inp.grad = inp.grad + gi


# --- gradient checking ----------------------------------------------------


def gradcheck(f, xs, eps=1e-5, max_coords=None, seed=0):
    """Max relative error between tape gradients and central differences.

    f must be scalar-valued; xs is one tensor or a sequence of tensors to
    check. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|). When max_coords is set, a
    deterministic random subset of coordinates is probed per tensor.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    single = isinstance(xs, Tensor)
    xs = [xs] if single else list(xs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with Tape():
        out = f(*xs)
        if out.size != 1:
            raise ContractError(f"gradcheck needs a scalar-valued f, got shape {out.shape}")
        backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, ga in zip(xs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        gaf = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*xs).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(*xs).data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gaf[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
