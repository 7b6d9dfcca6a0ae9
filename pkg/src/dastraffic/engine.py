"""Small reverse-mode autodiff core over numpy arrays.

Only the operations needed by the recurrent and attention layers are
provided.  Shapes are explicit: binary ops require equal shapes, except
that a 1-D bias may be added along the last axis and a 2-D weight may
right-multiply a batched operand.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigError, NonFiniteError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for (..., m, k) @ (k, n) or equal-batch (..., m, k) @ (..., k, n)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ConfigError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _wrap(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def softmax_rows(x) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


# --------------------------------------------------------------------------
# Pointwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    a, b = _wrap(a), _wrap(b)
    if b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return _node(a.data + b.data, (a, b), bw, "add_bias")
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def pointwise(op: str, *args):
    """Dispatch by name: sigmoid, tanh, relu, add, mul, scale."""
    table = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul, "scale": scale}
    try:
        return table[op](*args)
    except KeyError:
        raise ConfigError(f"unknown pointwise op {op!r}") from None


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when p == 0."""
    if not 0 <= p < 1:
        raise ConfigError("dropout probability must be in [0, 1)")
    x = _wrap(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take(x, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is removed)."""
    x = _wrap(x)
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(np.take(x.data, index, axis=axis), (x,), bw, "take")


def slice_last(x, start: int, stop: int) -> Tensor:
    x = _wrap(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop], (x,), bw, "slice")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(xs, axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _node(out, tuple(xs), bw, "stack")


def reverse(x, axis: int) -> Tensor:
    x = _wrap(x)
    return _node(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),), "reverse")


# --------------------------------------------------------------------------
# Reductions and losses
# --------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    x = _wrap(x)
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x) -> Tensor:
    x = _wrap(x)
    n = x.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


def log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ConfigError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError("label out of range")
    flat = logits.data.reshape(-1, c)
    lab = labels.reshape(-1).astype(np.int64)
    lsm = log_softmax(flat)
    n = lab.size
    loss = -lsm[np.arange(n), lab].mean()

    def bw(g):
        grad = np.exp(lsm)
        grad[np.arange(n), lab] -= 1.0
        return ((float(g) / n) * grad.reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------
# Differentiation
# --------------------------------------------------------------------------

def _topo(root):
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


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns {leaf: grad}."""
    if loss.size != 1:
        raise ConfigError("backward needs a scalar loss")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad_check(f, params, h: float = 1e-5, probes: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and rebuilds the scalar loss from the current
    values of ``params``.  With ``probes`` set, random unit directions are
    checked instead of every coordinate.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value():
        with no_grad():
            return float(f().data)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    if probes is None:
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = value()
                flat[j] = orig - h
                down = value()
                flat[j] = orig
                worst = max(worst, rel(ga.reshape(-1)[j], (up - down) / (2 * h)))
        return worst

    rng = rng or np.random.default_rng(0)
    for _ in range(probes):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        orig = [p.data.copy() for p in params]
        for p, o, d in zip(params, orig, dirs):
            p.data[...] = o + h * d
        up = value()
        for p, o, d in zip(params, orig, dirs):
            p.data[...] = o - h * d
        down = value()
        for p, o in zip(params, orig):
            p.data[...] = o
        a = sum(float(np.sum(ga * d)) for ga, d in zip(analytic, dirs))
        worst = max(worst, rel(a, (up - down) / (2 * h)))
    return worst
