"""Minimal reverse-mode differentiation over channels-last (N, H, W, C) arrays.

Each op returns a ``Tensor`` holding its value, its parents and a closure that
pushes the output gradient back to the parents. ``Tensor.backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for scalars) to every ancestor."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value))


def parameter(value, name=None) -> Tensor:
    return Tensor(np.asarray(value), requires_grad=True, name=name)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g)
        b._accumulate(g)
    return Tensor(a.value + b.value, (a, b), backward)


def scale(x: Tensor, k: float) -> Tensor:
    return Tensor(x.value * k, (x,), lambda g: x._accumulate(g * k))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor(x.value.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inverse)))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    ``x`` is (N, H, W, C); ``w`` is stored as (O, C, k, k).
    """
    n, h, wd, c = x.value.shape
    o, c2, k, k2 = w.value.shape
    if c != c2 or k != k2 or k % 2 != 1:
        raise ValueError(f"conv shape mismatch: input {x.value.shape}, kernel {w.value.shape}")
    p = k // 2
    xp = np.pad(x.value, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, wd, k, k, c), dtype=x.value.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + wd, :]
    cols = cols.reshape(n * h * wd, k * k * c)
    wmat = w.value.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T + b.value).reshape(n, h, wd, o)

    def backward(g):
        gmat = g.reshape(n * h * wd, o)
        if w.requires_grad:
            w._accumulate((cols.T @ gmat).T.reshape(o, k, k, c).transpose(0, 3, 1, 2))
        if b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, h, wd, k, k, c)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
            x._accumulate(dxp[:, p:p + h, p:p + wd, :])

    return Tensor(out, (x, w, b), backward)


def maxpool2(x: Tensor) -> Tensor:
    n, h, w, c = x.value.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even extent, got {(h, w)}")
    blocks = x.value.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        x._accumulate(gb.reshape(n, h, w, c))

    return Tensor(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    out = x.value.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        n, h, w, c = g.shape
        x._accumulate(g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)))

    return Tensor(out, (x,), backward)


def concat(xs: list[Tensor]) -> Tensor:
    """Join along the channel (last) axis."""
    sizes = [t.value.shape[-1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            t._accumulate(g[..., lo:hi])

    return Tensor(np.concatenate([t.value for t in xs], axis=-1), tuple(xs), backward)


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.value)
    out = x.value * s
    return Tensor(out, (x,), lambda g: x._accumulate(g * (s + out * (1.0 - s))))


def scaled_tanh(x: Tensor, bound: float) -> Tensor:
    t = np.tanh(x.value)
    return Tensor(bound * t, (x,), lambda g: x._accumulate(g * bound * (1.0 - t * t)))


def sum_squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.value - target
    return Tensor(np.asarray((diff * diff).sum()), (pred,), lambda g: pred._accumulate(2.0 * g * diff))


def bce_with_logits_mean(logits: Tensor, target: np.ndarray) -> Tensor:
    z = logits.value
    per = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        logits._accumulate(g * (_sigmoid(z) - target) / n)

    return Tensor(np.asarray(per.mean()), (logits,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; used to inject an arbitrary upstream gradient."""
    return Tensor(np.asarray((x.value * weights).sum()), (x,), lambda g: x._accumulate(g * weights))
