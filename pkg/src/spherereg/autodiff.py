"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every reachable node.  Only the operations the
registration pipeline needs are provided; all arithmetic is double
precision.
"""

from __future__ import annotations

import numpy as np

_LEAKY_DEFAULT = 0.2


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjps", "requires_grad", "name")

    # make numpy defer to the reflected operators instead of building
    # object arrays when an ndarray appears on the left-hand side
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=(), requires_grad=True, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name})"

    # -- operator sugar ----------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) tensor w.r.t. the tape."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + contrib


def _toposort(root: Tensor):
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def constant(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, out, vjp_a, vjp_b):
    a, b = as_tensor(a), as_tensor(b)
    need = a.requires_grad or b.requires_grad
    return Tensor(out(a.value, b.value), (a, b), (vjp_a(a, b), vjp_b(a, b)),
                  requires_grad=need)


def add(a, b):
    return _binary(
        a, b, np.add,
        lambda a, b: lambda g: _unbroadcast(g, a.value.shape),
        lambda a, b: lambda g: _unbroadcast(g, b.value.shape),
    )


def sub(a, b):
    return _binary(
        a, b, np.subtract,
        lambda a, b: lambda g: _unbroadcast(g, a.value.shape),
        lambda a, b: lambda g: _unbroadcast(-g, b.value.shape),
    )


def mul(a, b):
    return _binary(
        a, b, np.multiply,
        lambda a, b: lambda g: _unbroadcast(g * b.value, a.value.shape),
        lambda a, b: lambda g: _unbroadcast(g * a.value, b.value.shape),
    )


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda a, b: lambda g: _unbroadcast(g / b.value, a.value.shape),
        lambda a, b: lambda g: _unbroadcast(-g * a.value / b.value**2, b.value.shape),
    )


def power(a, p: float):
    a = as_tensor(a)
    return Tensor(
        a.value**p, (a,),
        (lambda g: g * p * a.value ** (p - 1),),
        requires_grad=a.requires_grad,
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim == 2 and b.value.ndim == 2:
        vjps = (lambda g: g @ b.value.T, lambda g: a.value.T @ g)
    elif a.value.ndim == 2 and b.value.ndim == 1:
        vjps = (lambda g: np.outer(g, b.value), lambda g: a.value.T @ g)
    elif a.value.ndim == 1 and b.value.ndim == 2:
        vjps = (lambda g: b.value @ g, lambda g: np.outer(a.value, g))
    else:
        raise ValueError("matmul supports 1-D/2-D operands only")
    return Tensor(a.value @ b.value, (a, b), vjps,
                  requires_grad=a.requires_grad or b.requires_grad)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), (lambda g: g * out,), requires_grad=a.requires_grad)


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), (lambda g: g / a.value,),
                  requires_grad=a.requires_grad)


def sqrt(a, eps: float = 0.0):
    """Square root; a small ``eps`` inside keeps the backward pass finite
    at exact zeros (needed by gradient-magnitude penalties)."""
    a = as_tensor(a)
    out = np.sqrt(a.value + eps)
    return Tensor(out, (a,), (lambda g: g * 0.5 / out,),
                  requires_grad=a.requires_grad)


def leaky_relu(a, slope: float = _LEAKY_DEFAULT):
    a = as_tensor(a)
    pos = a.value > 0
    factor = np.where(pos, 1.0, slope)
    return Tensor(a.value * factor, (a,), (lambda g: g * factor,),
                  requires_grad=a.requires_grad)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return Tensor(out, (a,), (vjp,), requires_grad=a.requires_grad)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape), (a,),
                  (lambda g: g.reshape(a.value.shape),),
                  requires_grad=a.requires_grad)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor(np.transpose(a.value, axes), (a,),
                  (lambda g: np.transpose(g, inv),),
                  requires_grad=a.requires_grad)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(i) for i in range(len(tensors))),
        requires_grad=any(t.requires_grad for t in tensors),
    )


def gather(a, index):
    """Index rows (axis 0) with an arbitrary integer array; gradients
    scatter-add back."""
    a = as_tensor(a)
    index = np.asarray(index)

    def vjp(g):
        # bincount per trailing column is much faster than np.add.at
        n = a.value.shape[0]
        flat_idx = index.ravel()
        cols = int(np.prod(a.value.shape[1:], dtype=int))
        g2 = np.ascontiguousarray(g).reshape(-1, cols)
        out = np.empty((n, cols))
        for c in range(cols):
            out[:, c] = np.bincount(flat_idx, weights=g2[:, c], minlength=n)
        return out.reshape(a.value.shape)

    return Tensor(a.value[index], (a,), (vjp,), requires_grad=a.requires_grad)


def max_reduce(a, axis):
    """Max along one axis; the gradient routes to the first argmax."""
    a = as_tensor(a)
    out = a.value.max(axis=axis)
    arg = a.value.argmax(axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.value)
        idx = list(np.indices(out.shape))
        idx.insert(axis if axis >= 0 else a.value.ndim + axis, arg)
        grad[tuple(idx)] = g
        return grad

    return Tensor(out, (a,), (vjp,), requires_grad=a.requires_grad)


def where_const(cond, a, fill):
    """Select ``a`` where a constant boolean array holds, else ``fill``."""
    a = as_tensor(a)
    cond = np.asarray(cond, dtype=bool)
    return Tensor(
        np.where(cond, a.value, fill), (a,),
        (lambda g: np.where(cond, g, 0.0),),
        requires_grad=a.requires_grad,
    )


def einsum(spec: str, a, b):
    """Two-operand einsum.  Every index of each operand must appear in the
    output or in the other operand (no internal traces)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_spec = spec.split("->")
    a_spec, b_spec = ins.split(",")

    def vjp_a(g):
        return np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.value)

    def vjp_b(g):
        return np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.value)

    return Tensor(np.einsum(spec, a.value, b.value), (a, b), (vjp_a, vjp_b),
                  requires_grad=a.requires_grad or b.requires_grad)


def bmm(a, b):
    """Batched matrix multiply on (..., n, k) @ (..., k, m) stacks; leading
    batch shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[:-2] != b.value.shape[:-2]:
        raise ValueError("bmm requires identical batch shapes")
    return Tensor(
        np.matmul(a.value, b.value), (a, b),
        (
            lambda g: np.matmul(g, b.value.swapaxes(-1, -2)),
            lambda g: np.matmul(a.value.swapaxes(-1, -2), g),
        ),
        requires_grad=a.requires_grad or b.requires_grad,
    )


def cross(a, b):
    """Cross product along the last axis (3-vectors)."""
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        np.cross(a.value, b.value), (a, b),
        (
            lambda g: _unbroadcast(np.cross(b.value, g), a.value.shape),
            lambda g: _unbroadcast(np.cross(g, a.value), b.value.shape),
        ),
        requires_grad=a.requires_grad or b.requires_grad,
    )


def softmax_rows(a):
    """Numerically stable softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return Tensor(out, (a,), (vjp,), requires_grad=a.requires_grad)


def normalize_rows(a, eps: float = 0.0):
    """Scale the last axis to unit Euclidean norm."""
    norm = sqrt(sum_(mul(a, a), axis=-1, keepdims=True), eps)
    return div(a, norm)


# -- primitive registry for gradient verification -------------------------

def _rand(shapes):
    def gen(rng):
        return [rng.standard_normal(s) for s in shapes]
    return gen


def _randpos(shapes):
    def gen(rng):
        return [rng.random(s) + 0.5 for s in shapes]
    return gen


# name -> (builder taking Tensors, sample-input generator)
OP_REGISTRY = {
    "add": (add, _rand([(4, 3), (4, 3)])),
    "sub": (sub, _rand([(4, 3), (4, 3)])),
    "mul": (mul, _rand([(4, 3), (4, 3)])),
    "mul_broadcast": (mul, _rand([(4, 1, 3), (1, 5, 3)])),
    "div": (div, _randpos([(4, 3), (4, 3)])),
    "power": (lambda a: power(a, 3.0), _randpos([(4, 3)])),
    "matmul": (matmul, _rand([(4, 3), (3, 5)])),
    "exp": (exp, _rand([(4, 3)])),
    "log": (log, _randpos([(4, 3)])),
    "sqrt": (sqrt, _randpos([(4, 3)])),
    "leaky_relu": (leaky_relu, _rand([(4, 3)])),
    "sum": (lambda a: sum_(a, axis=1), _rand([(4, 3)])),
    "mean": (lambda a: mean_(a, axis=0), _rand([(4, 3)])),
    "reshape": (lambda a: reshape(a, (3, 4)), _rand([(4, 3)])),
    "transpose": (lambda a: transpose(a, (1, 0)), _rand([(4, 3)])),
    "concat": (lambda a, b: concat([a, b], axis=1), _rand([(4, 3), (4, 2)])),
    "gather": (
        lambda a: gather(a, np.array([[0, 1], [2, 2], [3, 0]])),
        _rand([(5, 3)]),
    ),
    "max_reduce": (lambda a: max_reduce(a, axis=1), _rand([(4, 6)])),
    "where_const": (
        lambda a: where_const(np.arange(12).reshape(4, 3) % 2 == 0, a, -1.0),
        _rand([(4, 3)]),
    ),
    "einsum": (lambda a, b: einsum("vsj,vsc->vjc", a, b), _rand([(4, 5, 2), (4, 5, 3)])),
    "bmm": (bmm, _rand([(4, 2, 5), (4, 5, 3)])),
    "cross": (cross, _rand([(4, 3), (4, 3)])),
    "softmax_rows": (softmax_rows, _rand([(4, 6)])),
    "normalize_rows": (normalize_rows, _rand([(4, 3)])),
}
