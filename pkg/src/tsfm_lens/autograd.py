"""A minimal tape-based reverse-mode differentiator over numpy arrays.

Only the handful of operations the toy forecasters need are provided. Each
op computes its forward value eagerly and, when gradients are enabled and an
input requires them, records a closure that maps the output cotangent to the
input cotangents.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# per thread, so no_grad blocks in worker threads cannot clobber each other
_STATE = threading.local()

GELU_C = np.sqrt(2.0 / np.pi)


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _result(data, parents, backward):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    order, seen = [], set()
    stack = [(loss, False)]
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
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


# --- ops -------------------------------------------------------------------

def add(a, b):
    a, b = tensor(a), tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = tensor(a), tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    a, b = tensor(a), tensor(b)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def swapaxes(a, i=-1, j=-2):
    a = tensor(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def sum_axis(a, axis):
    a = tensor(a)
    return _result(
        a.data.sum(axis=axis), (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
    )


def getitem(a, index):
    a = tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _result(a.data[index], (a,), bw)


def concat(items, axis=0):
    items = [tensor(t) for t in items]
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _result(
        np.concatenate([t.data for t in items], axis=axis), tuple(items),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def embed(table, ids):
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), bw)


def rmsnorm(x, gain, eps=1e-6):
    x, gain = tensor(x), tensor(gain)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xr = x.data * r

    def bw(g):
        u = g * gain.data
        d = x.shape[-1]
        gx = r * u - (r ** 3) * x.data * np.sum(u * x.data, axis=-1, keepdims=True) / d
        return gx, _unbroadcast(g * xr, gain.shape)

    return _result(xr * gain.data, (x, gain), bw)


def softmax(x, mask=None):
    """Softmax over the last axis; positions where ``mask`` is False get weight 0."""
    x = tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _result(p, (x,), bw)


def gelu(x):
    x = tensor(x)
    v = x.data
    inner = GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return _result(0.5 * v * (1.0 + t), (x,), bw)


def rope(x, cos, sin):
    """Rotate the two halves of the last axis by per-position angles."""
    x = tensor(x)
    h = x.shape[-1] // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _result(out, (x,), bw)


def reshape(x, shape):
    x = tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# --- losses ----------------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-softmax(logits)."""
    logits = tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    n = t.shape[0]
    loss = -np.mean(logp[np.arange(n), t])

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss), (logits,), bw)


def mse(pred, target):
    pred = tensor(pred)
    diff = pred.data - np.asarray(target, dtype=np.float64)
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,))


def pinball(pred, target, levels):
    """Mean quantile loss; ``pred[..., k]`` is the forecast at ``levels[k]``."""
    pred = tensor(pred)
    levels = np.asarray(levels, dtype=np.float64)
    e = np.asarray(target, dtype=np.float64)[..., None] - pred.data
    loss = np.maximum(levels * e, (levels - 1.0) * e)
    n = loss.size

    def bw(g):
        d = np.where(e > 0, -levels, 1.0 - levels)
        return (g * d / n,)

    return _result(np.asarray(np.mean(loss)), (pred,), bw)
