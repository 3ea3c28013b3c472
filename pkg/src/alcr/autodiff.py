"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op records a closure on the output tensor mapping the output gradient
to one gradient per parent. ``backward`` walks the recorded graph in reverse
topological order. The graph lives only as long as the tensors that
reference it, so each forward pass builds a fresh tape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from alcr import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


# -- reductions and shape ---------------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), backward)


def mean(a):
    n = a.data.size
    return mul(sum(a), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, index):
    """Basic or advanced indexing; the gradient scatter-adds into the source."""
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = not any(isinstance(i, (np.ndarray, list)) for i in parts)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


def unfold1d(a, width):
    """Sliding windows over the last axis, zero padded: (B, T) -> (B, T, width)."""
    half = width // 2
    batch, steps = a.shape
    padded = np.pad(a.data, ((0, 0), (half, width - 1 - half)))
    out = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)

    def backward(g):
        gp = np.zeros((batch, steps + width - 1))
        for k in range(width):
            gp[:, k:k + steps] += g[:, :, k]
        return (gp[:, half:half + steps],)

    return _result(np.ascontiguousarray(out), (a,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading axes."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def weighted_sum(w, v):
    """Batched ``sum_t w[b, t] * v[b, t, :]`` (attention context)."""
    def backward(g):
        gw = np.einsum("btd,bd->bt", v.data, g)
        gv = w.data[:, :, None] * g[:, None, :]
        return gw, gv

    return _result(np.einsum("bt,btd->bd", w.data, v.data), (w, v), backward)


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids.ravel(), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), backward)


# -- normalisation and losses ----------------------------------------------

def softmax(a, mask=None):
    """Softmax over the last axis; ``mask`` zeroes excluded positions."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward)


def log_softmax(a):
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), backward)


def nll_sum(logp, targets, mask):
    """Sum of ``-logp[..., target]`` over unmasked positions.

    ``logp`` holds log-probabilities (B, L, V); targets and mask are (B, L).
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
    value = -(picked * mask).sum()

    def backward(g):
        out = np.zeros(logp.shape)
        np.put_along_axis(out, targets[..., None], (-g * mask)[..., None], axis=-1)
        return (out,)

    return _result(np.asarray(value), (logp,), backward)


# -- fused recurrent ops ----------------------------------------------------

def gru_cell(xg, h, w_h, b_h):
    """One gated recurrent step given precomputed input gates ``xg`` (B, 3H)."""
    size = h.shape[-1]
    hg = h.data @ w_h.data + b_h.data
    r = _sigmoid(xg.data[:, :size] + hg[:, :size])
    z = _sigmoid(xg.data[:, size:2 * size] + hg[:, size:2 * size])
    hn = hg[:, 2 * size:]
    n = np.tanh(xg.data[:, 2 * size:] + r * hn)
    out = (1.0 - z) * n + z * h.data

    def backward(g):
        dan = g * (1.0 - z) * (1.0 - n * n)
        dar = dan * hn * r * (1.0 - r)
        daz = g * (h.data - n) * z * (1.0 - z)
        dxg = np.concatenate([dar, daz, dan], axis=1)
        dhg = np.concatenate([dar, daz, dan * r], axis=1)
        dh = g * z + dhg @ w_h.data.T
        return dxg, dh, h.data.T @ dhg, dhg.sum(axis=0)

    return _result(out, (xg, h, w_h, b_h), backward)


def gru_scan(xg, h0, w_h, b_h, mask):
    """Run a gated recurrent layer over time.

    ``xg`` (B, T, 3H) holds input projections, ``mask`` (B, T) freezes the
    state on padded steps. Returns all hidden states (B, T, H).
    """
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    hs, cache = kernels.gru_scan_forward(xg.data, h0.data, w_h.data, b_h.data, mask)

    def backward(g):
        return kernels.gru_scan_backward(np.ascontiguousarray(g), xg.data, h0.data,
                                         w_h.data, mask, hs, cache)

    return _result(hs, (xg, h0, w_h, b_h), backward)


# -- graph traversal --------------------------------------------------------

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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Reverse pass from a scalar ``loss``.

    Leaf tensors receive this pass's gradient in ``.grad`` (overwriting any
    earlier value); returns ``{name: grad}`` for named leaves. The recorded
    graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    named = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient at {node!r}")
            node.grad = g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
    return named


# -- optimisation -----------------------------------------------------------

def global_norm(grads):
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_global_norm(grads, max_norm=400.0):
    """Scale every gradient by ``max_norm / N`` when the global L2 norm N exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place to ``params`` (name -> Tensor).

    Parameters without a gradient are treated as having zero gradient.
    Returns the updated state.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_at_epoch(lr0, epoch, divisor=1.1):
    if lr0 <= 0 or divisor <= 1:
        raise ValueError("need lr0 > 0 and divisor > 1")
    return lr0 / divisor ** epoch
