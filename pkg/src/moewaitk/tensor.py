"""Minimal float32 tensors with tape-based reverse-mode autodiff.

Only the operations a small encoder-decoder transformer needs are provided.
Broadcasting follows numpy rules for the binary elementwise ops and for
``matmul`` leading dimensions; gradients are summed back to input shapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != DTYPE and arr.dtype != np.float64:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)


class Tape:
    """Ordered record of executed operations.

    Execution order is a topological order, so backward replays the
    recorded nodes in reverse.
    """

    def __init__(self):
        self.nodes = []

    def record(self, node):
        node._tape = self
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node._tape = None
            node._parents = ()
            node._backward = None
        self.nodes = []

    def backward(self, loss):
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    pg = pg.astype(parent.data.dtype, copy=False)
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad += pg


_local = threading.local()


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def recording():
    """Record differentiable operations executed inside the block."""
    tape = Tape()
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every participating leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not recorded on a tape (run the forward inside recording())")
    loss._tape.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = np.float32(b) if a.data.dtype == DTYPE else float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def relu(x):
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def dropout(x, p, rng):
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0 or rng is None:
        return x
    threshold = int(round(p * 65536))
    keep = rng.integers(0, 65536, x.shape, dtype=np.uint16) >= threshold
    keep = keep.astype(x.data.dtype) * np.float32(65536 / (65536 - threshold))
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# shape ----------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def getitem(x, index):
    """Basic slicing (no fancy indexing)."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), bw)


def masked_fill(x, mask, value):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),))


# reductions -----------------------------------------------------------------

def tsum(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.data.dtype),))


def sum_axis(x, axis):
    shape = x.shape
    return _make(x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean(x):
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # one large GEMM instead of a stack of small ones
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ bd).reshape(lead + (bd.shape[1],)), (a, b), bw2)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def prefix_mask(visible, n):
    """Boolean mask ``[..., n]`` true at positions ``< visible``."""
    visible = np.asarray(visible)
    return np.arange(n) < visible[..., None]


def masked_softmax(x, visible=None):
    """Softmax over the last axis restricted to the first ``visible`` entries.

    ``visible`` broadcasts against ``x.shape[:-1]``; masked positions get
    probability exactly 0 and never enter an exponential.
    """
    xd = x.data
    if visible is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        visible = np.asarray(visible)
        if np.any(visible < 1):
            raise ValueError("masked_softmax needs at least one visible position per row")
        mask = prefix_mask(visible, xd.shape[-1])
        mask = np.broadcast_to(mask, xd.shape)
        z = np.where(mask, xd, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0)), 0).astype(xd.dtype)
        out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


def masked_mean(x, visible):
    """Mean over the first ``visible`` entries of the last axis."""
    xd = x.data
    visible = np.asarray(visible)
    mask = np.broadcast_to(prefix_mask(visible, xd.shape[-1]), xd.shape)
    denom = np.broadcast_to(visible, xd.shape[:-1]).astype(xd.dtype)[..., None]
    out = np.where(mask, xd, 0).sum(axis=-1) / denom[..., 0]

    def bw(g):
        return (np.where(mask, g[..., None] / denom, 0).astype(xd.dtype),)

    return _make(out.astype(xd.dtype), (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g):
        gg = g * gamma.data
        gx = inv / n * (n * gg - gg.sum(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), bw)


def embedding(weight, ids):
    ids = np.asarray(ids)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw)


def log_softmax(x):
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, targets, ignore_index=0, smoothing=0.0):
    """Mean token cross-entropy over non-ignored targets.

    With ``smoothing`` eps the target distribution is (1-eps) one-hot plus
    eps spread uniformly over the vocabulary. Summation is done in float64.
    """
    xd = logits.data
    v = xd.shape[-1]
    flat = xd.reshape(-1, v)
    tgt = np.asarray(targets).reshape(-1)
    keep = tgt != ignore_index
    count = max(int(keep.sum()), 1)
    z = flat.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(len(tgt)), tgt]
    per_tok = (1 - smoothing) * nll - smoothing * logp.mean(axis=-1)
    loss = float((per_tok * keep).sum() / count)

    def bw(g):
        p = np.exp(logp)
        q = np.full_like(p, smoothing / v)
        q[np.arange(len(tgt)), tgt] += 1 - smoothing
        grad = (p - q) * keep[:, None] * (float(g) / count)
        return (grad.reshape(xd.shape).astype(xd.dtype),)

    return _make(np.asarray(loss, dtype=xd.dtype), (logits,), bw)


def token_losses(logits, targets, ignore_index=0):
    """Per-position negative log-likelihood (no tape), 0 at ignored positions."""
    xd = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = xd - xd.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    tgt = np.asarray(targets)
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    return np.where(tgt == ignore_index, 0.0, nll)
