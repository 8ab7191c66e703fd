"""Reverse-mode differentiation over small float64 numpy arrays.

A ``Var`` wraps an ndarray and remembers how it was computed. Calling
:func:`backward` with one or more seeded output nodes walks the recorded
graph once in reverse topological order and accumulates vector-Jacobian
products into ``.grad`` of every reachable node. The op set is exactly
what the model and the losses need; everything works in float64.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _as_value(x) -> Array:
    if isinstance(x, Var):
        raise TypeError("expected a plain array, got a Var")
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the computation graph: a value plus parent edges.

    Each parent edge carries a function mapping the gradient at this
    node to the gradient contribution for that parent.
    """

    __slots__ = ("value", "parents", "grad")

    # make `ndarray <op> Var` defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)  # tuple of (Var, vjp callable)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value
    return Var(out, (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value
    return Var(out, (
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ))


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value
    return Var(out, (
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
    ))


def power(a, exponent: float) -> Var:
    """Elementwise a**exponent for a constant exponent."""
    a = _wrap(a)
    e = float(exponent)
    out = a.value ** e
    return Var(out, (
        (a, lambda g: g * e * a.value ** (e - 1.0)),
    ))


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value @ b.value
    return Var(out, (
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ))


# -- shape ops ---------------------------------------------------------


def reshape(a, shape) -> Var:
    a = _wrap(a)
    return Var(a.value.reshape(shape), (
        (a, lambda g: g.reshape(a.value.shape)),
    ))


def transpose(a, axes=None) -> Var:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inverse = tuple(np.argsort(axes))
    return Var(a.value.transpose(axes), (
        (a, lambda g: g.transpose(inverse)),
    ))


def take(a, idx) -> Var:
    """Indexing / slicing; the backward pass scatter-adds into place."""
    a = _wrap(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return full

    return Var(a.value[idx], ((a, vjp),))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = _wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return Var(out, ((a, vjp),))


def vmean(a, axis=None) -> Var:
    a = _wrap(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


# -- elementwise nonlinearities ----------------------------------------


def tanh(a) -> Var:
    a = _wrap(a)
    out = np.tanh(a.value)
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),))


def sigmoid(a) -> Var:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Var(out, ((a, lambda g: g * out * (1.0 - out)),))


def exp(a) -> Var:
    a = _wrap(a)
    out = np.exp(a.value)
    return Var(out, ((a, lambda g: g * out),))


def log(a) -> Var:
    a = _wrap(a)
    return Var(np.log(a.value), ((a, lambda g: g / a.value),))


def clamped_log(a, floor: float) -> Var:
    """log(max(a, floor)); zero gradient where the clamp is active."""
    a = _wrap(a)
    clamped = np.maximum(a.value, floor)
    mask = a.value > floor
    return Var(np.log(clamped), ((a, lambda g: g * mask / clamped),))


def softmax(a, axis: int) -> Var:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return Var(out, ((a, vjp),))


# -- 3x3 same-padding convolution --------------------------------------


def _im2col3(padded: Array, c_in: int, h: int, w: int) -> Array:
    """Unfold 3x3 neighborhoods into a (c_in*9, h*w) matrix."""
    cols = np.empty((c_in, 9, h * w), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + h, dx:dx + w]
            cols[:, dy * 3 + dx, :] = patch.reshape(c_in, -1)
    return cols.reshape(c_in * 9, h * w)


def conv3x3(x, weight, bias) -> Var:
    """Same-padding 3x3 convolution.

    x is (c_in, h, w), weight is (c_out, c_in, 3, 3), bias is (c_out,).
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    c_in, h, w = x.value.shape
    c_out = weight.value.shape[0]
    padded = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:h + 1, 1:w + 1] = x.value
    cols = _im2col3(padded, c_in, h, w)
    flat = weight.value.reshape(c_out, c_in * 9)
    out = (flat @ cols + bias.value[:, None]).reshape(c_out, h, w)

    def vjp_x(g):
        gflat = g.reshape(c_out, h * w)
        dcols = (flat.T @ gflat).reshape(c_in, 9, h, w)
        dpadded = np.zeros_like(padded)
        for dy in range(3):
            for dx in range(3):
                dpadded[:, dy:dy + h, dx:dx + w] += dcols[:, dy * 3 + dx]
        return dpadded[:, 1:h + 1, 1:w + 1]

    def vjp_w(g):
        return (g.reshape(c_out, h * w) @ cols.T).reshape(weight.value.shape)

    return Var(out, (
        (x, vjp_x),
        (weight, vjp_w),
        (bias, lambda g: g.sum(axis=(1, 2))),
    ))


# -- backward pass -----------------------------------------------------


def backward(seeds: list[tuple[Var, Array]]) -> None:
    """Propagate seeded gradients back through the graph.

    `seeds` pairs output nodes with upstream gradients of matching
    shape. Gradients of every node reachable from the seeds are left in
    `.grad`; unreachable nodes are untouched. Previous `.grad` contents
    of reachable nodes are discarded.
    """
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(node, False) for node, _ in seeds]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    for node, seed in seeds:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != node.value.shape:
            raise ValueError("seed shape %s does not match node shape %s"
                             % (seed.shape, node.value.shape))
        node.grad = seed if node.grad is None else node.grad + seed

    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contribution
