"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when produced by one of the ops in
this module, remembers its parents and a closure that pushes its gradient
back to them. Graphs are built fresh on every forward pass and are owned by
the calling thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractViolation


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "partition", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _backward=None,
                 check_finite=True):
        arr = np.asarray(data, dtype=np.float64)
        if check_finite and not np.isfinite(arr).all():
            raise ContractViolation("tensor contains NaN or Inf")
        if any(s <= 0 for s in arr.shape):
            raise ContractViolation(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self.partition = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractViolation("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)


def _result(data, parents, backward):
    return Tensor(data, _parents=tuple(parents), _backward=backward, check_finite=False)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _topological(root):
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


@dataclass
class GradientBundle:
    """Named parameter gradients with views onto the first-layer partition."""

    grads: dict
    first_weight: str | None = None
    n_unstable: int | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def _first(self):
        if self.first_weight is None:
            raise ContractViolation("graph has no partitioned first-layer weight")
        return self.grads[self.first_weight]

    @property
    def W_u(self):
        return self._first()[:, : self.n_unstable, :]

    @property
    def W_s(self):
        return self._first()[:, self.n_unstable:, :]

    def scaled(self, factor):
        return GradientBundle({k: v * factor for k, v in self.grads.items()},
                              self.first_weight, self.n_unstable)

    def flat(self):
        return np.concatenate([v.ravel() for v in self.grads.values()])


def backward(loss):
    """Run reverse mode from a scalar ``loss`` and collect named leaf gradients."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads, first, n_u = {}, None, None
    for node in order:
        if node.name is None or not node.requires_grad or node._parents:
            continue
        g = node.grad if node.grad is not None else np.zeros_like(node.data)
        if not np.isfinite(g).all():
            raise ContractViolation(f"non-finite gradient for {node.name}")
        grads[node.name] = g
        if node.partition is not None:
            first, n_u = node.name, node.partition
    return GradientBundle(grads, first, n_u)


# ----------------------------------------------------------------- ops

def add(a, b):
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)
    return _result(a.data * c, (a,), bw)


def tsum(a):
    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _result(np.array(a.data.sum()), (a,), bw)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def conv1d(x, w, b):
    """Same-padded cross-correlation of (B, C, L) by (O, C, K) plus bias."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ContractViolation("conv1d expects x (B, C, L) and w (O, C, K)")
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(
            f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] % 2 != 1:
        raise ContractViolation("kernel size must be odd")
    y = kernels.conv1d_forward(x.data, w.data, b.data)

    def bw(g):
        gx, gw, gb = kernels.conv1d_backward(np.ascontiguousarray(g), x.data, w.data)
        _accumulate(x, gx)
        _accumulate(w, gw)
        _accumulate(b, gb)
    return _result(y, (x, w, b), bw)


def relu(x):
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)
    return _result(np.where(mask, x.data, 0.0), (x,), bw)


def tanh(x):
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - y * y))
    return _result(y, (x,), bw)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": lambda t: t}


def channel_mask(x, mask):
    """Multiply by a constant mask broadcast over positions, e.g. (B, C, 1)."""
    m = np.asarray(mask, dtype=np.float64)

    def bw(g):
        _accumulate(x, g * m)
    return _result(x.data * m, (x,), bw)


def _scalar(g):
    # upstream gradient of a scalar node, stored with the node's (1,)-style shape
    return float(np.asarray(g).reshape(-1)[0])


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.data.ndim != 3:
        raise ContractViolation("logits must be (B, K, L)")
    B, K, L = logits.shape
    if labels.shape != (B, L):
        raise ContractViolation(f"labels shape {labels.shape} does not match logits {(B, L)}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractViolation(f"labels must lie in [0, {K})")
    return np.ascontiguousarray(labels, dtype=np.int64)


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits, labels):
    """Mean over batch and positions of -log softmax(logits)[label], in nats."""
    labels = _check_labels(logits, labels)
    loss, grad = kernels.softmax_xent(logits.data, labels)

    def bw(g):
        _accumulate(logits, grad * _scalar(g))
    return _result(np.array(loss), (logits,), bw)


DICE_SMOOTH = 1e-5


def soft_dice_loss(logits, labels, smooth=DICE_SMOOTH):
    """1 - mean over samples and classes of soft Dice on softmax probabilities."""
    labels = _check_labels(logits, labels)
    B, K, L = logits.shape
    p = softmax(logits.data)
    t = np.zeros_like(p)
    np.put_along_axis(t, labels[:, None, :], 1.0, axis=1)
    inter = (p * t).sum(axis=2, keepdims=True)
    denom = p.sum(axis=2, keepdims=True) + t.sum(axis=2, keepdims=True) + smooth
    dice = (2.0 * inter + smooth) / denom
    loss = 1.0 - dice.mean()

    def bw(g):
        dp = -(2.0 * t * denom - (2.0 * inter + smooth)) / denom ** 2 / (B * K)
        dz = p * (dp - (p * dp).sum(axis=1, keepdims=True))
        _accumulate(logits, dz * _scalar(g))
    return _result(np.array(loss), (logits,), bw)


def dice_ce_loss(logits, labels):
    """Dice and cross-entropy, equally weighted."""
    return add(scale(soft_dice_loss(logits, labels), 0.5),
               scale(softmax_cross_entropy(logits, labels), 0.5))


def mean_entropy(logits):
    """Mean per-position entropy (nats) of softmax(logits)."""
    if logits.data.ndim != 3:
        raise ContractViolation("logits must be (B, K, L)")
    B, K, L = logits.shape
    logp = log_softmax(logits.data)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(logits, -p * (logp + h) * (_scalar(g) / (B * L)))
    return _result(np.array(h.mean()), (logits,), bw)


def squared_error(pred, target):
    """0.5 * sum of squared residuals."""
    target = np.asarray(target, dtype=np.float64)
    r = pred.data - target

    def bw(g):
        _accumulate(pred, r * _scalar(g))
    return _result(np.array(0.5 * float((r * r).sum())), (pred,), bw)
