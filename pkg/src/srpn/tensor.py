"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation executed while recording is appended to the
calling thread's current :class:`Tape`. :func:`backward` replays that tape in
reverse, accumulating gradients into leaf tensors that have
``requires_grad=True``. A tape can be replayed once; run the forward pass
again before the next call.

Binary operations accept tensors of identical shape or a python scalar.
Bias addition inside :func:`conv2d` is the only broadcast.
"""
import contextlib
import threading

import numpy as np

from srpn import kernels

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "current_tape",
    "add", "sub", "mul", "neg", "power", "tsum", "mean", "reshape", "transpose",
    "take", "concat", "relu", "logistic", "log", "clamp", "smooth_l1",
    "squared_l2", "conv2d", "maxpool2d",
]

_state = threading.local()


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self.visited = []  # op names in replay order, for inspection

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("op", "inputs", "backward", "grad", "index")

    def __init__(self, op, inputs, backward, index):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.grad = None
        self.index = index


def current_tape():
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = _state.tape = Tape()
    return tape


def _recording():
    return getattr(_state, "no_grad_depth", 0) == 0


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    _state.no_grad_depth = getattr(_state, "no_grad_depth", 0) + 1
    try:
        yield
    finally:
        _state.no_grad_depth -= 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self._tape = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._node = None
    out._tape = None
    if not _recording() or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t._tape is not None and t._tape.consumed:
            raise RuntimeError(f"{op}: input was produced on a tape that has already been replayed")
    tape = current_tape()
    node = _Node(op, inputs, backward_fn, len(tape.nodes))
    tape.nodes.append(node)
    out.requires_grad = True
    out._node = node
    out._tape = tape
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ValueError(f"backward needs a scalar loss, got shape {shape}")
    if loss._node is None:
        if not loss.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = loss._tape
    if tape.consumed:
        raise RuntimeError("backward already called for this forward pass; recompute the loss first")
    loss._node.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        tape.visited.append(node.op)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                t._node.grad = gi if t._node.grad is None else t._node.grad + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
        node.grad = None
    tape.consumed = True
    for node in tape.nodes:
        node.backward = None
        node.inputs = ()


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make("add", a.data + c, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -float(b))
    b = _as_tensor(b)
    _check_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make("mul", a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def power(a, p):
    """``a ** p`` for a constant exponent; ``a`` must be non-negative when ``p`` is fractional."""
    p = float(p)
    ad = a.data

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(ad),)
        return (g * p * ad ** (p - 1.0),)

    return _make("power", ad ** p, (a,), bw)


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a):
    n = a.size
    return mul(tsum(a), 1.0 / n) if n else Tensor(0.0)


def reshape(a, shape):
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def take(a, index):
    """Rows of ``a`` selected along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make("take", a.data[index], (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -- nonlinearities -----------------------------------------------------------

def relu(x):
    """max(x, 0) with subgradient 0 at exactly 0."""
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


def logistic(x):
    """1/(1+exp(-x)), evaluated without overflow and kept strictly inside (0, 1)."""
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _TINY, _ONE_MINUS)
    ds = e / (1.0 + e) ** 2
    return _make("logistic", s, (x,), lambda g: (g * ds,))


def log(x):
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log: input must be strictly positive; clamp first")
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x, lo, hi):
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def smooth_l1(x):
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    xd = x.data
    ax = np.abs(xd)
    small = ax < 1.0
    out = np.where(small, 0.5 * xd * xd, ax - 0.5)
    return _make("smooth_l1", out, (x,), lambda g: (g * np.where(small, xd, np.sign(xd)),))


def squared_l2(a, b):
    """Sum of squared differences over the last axis: [d] -> scalar, [n, d] -> [n]."""
    _check_same("squared_l2", a, b)
    diff = a.data - b.data
    return _make("squared_l2", np.asarray((diff * diff).sum(axis=-1)), (a, b),
                 lambda g: (2.0 * diff * np.expand_dims(g, -1), -2.0 * diff * np.expand_dims(g, -1)))


# -- spatial ------------------------------------------------------------------

def conv2d(x, w, b, padding=0):
    """Cross-correlation of ``x`` [C,H,W] with ``w`` [O,C,k,k] plus bias [O]."""
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d: expected input [C,H,W] and weights [O,C,k,k], got {x.shape} and {w.shape}")
    o, c, kh, kw = w.shape
    if c != x.shape[0]:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels but weights expect {c} (weights {w.shape})")
    if kh != kw:
        raise ValueError(f"conv2d: square kernels only, got {kh}x{kw}")
    if b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    padding = int(padding)
    if padding < 0 or x.shape[1] + 2 * padding < kh or x.shape[2] + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh} with padding {padding} does not fit input {x.shape}")
    out, cols = kernels.conv2d_forward(x.data, w.data, b.data, padding)
    x_shape, wd = x.shape, w.data

    def bw(g):
        return kernels.conv2d_backward(np.ascontiguousarray(g), x_shape, wd, cols, padding)

    return _make("conv2d", out, (x, w, b), bw)


def maxpool2d(x, size=2):
    if x.ndim != 3 or x.shape[1] % size or x.shape[2] % size:
        raise ValueError(f"maxpool2d: spatial dims of {x.shape} must be divisible by {size}")
    out, argmax = kernels.maxpool2d_forward(x.data, size)
    shape = x.shape
    return _make("maxpool2d", out, (x,), lambda g: (kernels.maxpool2d_backward(g, argmax, shape),))
