"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a float64 ndarray and records the operation that produced it,
forming an implicit tape (DAG). Calling ``backward`` on a scalar output
propagates gradients to every leaf marked ``requires_grad``. Only the op set
needed by the optimization pipeline is implemented; everything runs on CPU
in double precision for reproducibility.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "backward", "check_gradients",
    "sin", "cos", "exp", "log", "sqrt", "sigmoid", "clamp",
    "stack", "concat", "matmul", "softmin", "hard_min", "hard_max",
]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the gradient tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, parents=(self, other))
        def bw(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, parents=(self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, parents=(self, other))
        def bw(g):
            return (_unbroadcast(g * other.value, self.shape),
                    _unbroadcast(g * self.value, other.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, parents=(self, other))
        def bw(g):
            return (_unbroadcast(g / other.value, self.shape),
                    _unbroadcast(-g * self.value / other.value ** 2, other.shape))
        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        assert np.isscalar(p), "only constant exponents are differentiable"
        out = Tensor(self.value ** p, parents=(self,))
        out._backward = lambda g: (g * p * self.value ** (p - 1),)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], parents=(self,))
        def bw(g):
            full = np.zeros_like(self.value)
            np.add.at(full, idx, g)
            return (full,)
        out._backward = bw
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), parents=(self,))
        out._backward = lambda g: (g.reshape(self.shape),)
        return out

    @property
    def T(self):
        out = Tensor(self.value.T, parents=(self,))
        out._backward = lambda g: (g.T,)
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.value.sum(axis=axis), parents=(self,))
        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gx = np.expand_dims(g, axis)
            return (np.broadcast_to(gx, self.shape).copy(),)
        out._backward = bw
        return out

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def norm(self, axis=None, eps=1e-12):
        """L2 norm, smoothed at zero by ``eps``."""
        return ((self * self).sum(axis=axis) + eps) ** 0.5

    def item(self):
        return float(self.value)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions --------------------------------------------------

def sin(x):
    x = as_tensor(x)
    out = Tensor(np.sin(x.value), parents=(x,))
    out._backward = lambda g: (g * np.cos(x.value),)
    return out


def cos(x):
    x = as_tensor(x)
    out = Tensor(np.cos(x.value), parents=(x,))
    out._backward = lambda g: (-g * np.sin(x.value),)
    return out


def exp(x):
    x = as_tensor(x)
    out = Tensor(np.exp(x.value), parents=(x,))
    out._backward = lambda g: (g * out.value,)
    return out


def log(x):
    x = as_tensor(x)
    out = Tensor(np.log(x.value), parents=(x,))
    out._backward = lambda g: (g / x.value,)
    return out


def sqrt(x):
    return as_tensor(x) ** 0.5


def sigmoid(x):
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = Tensor(s, parents=(x,))
    out._backward = lambda g: (g * s * (1.0 - s),)
    return out


def clamp(x, lo=None, hi=None):
    """Clamp with subgradient: zero gradient outside [lo, hi]."""
    x = as_tensor(x)
    v = np.clip(x.value, lo, hi)
    inside = np.ones_like(x.value)
    if lo is not None:
        inside = inside * (x.value >= lo)
    if hi is not None:
        inside = inside * (x.value <= hi)
    out = Tensor(v, parents=(x,))
    out._backward = lambda g: (g * inside,)
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value @ b.value, parents=(a, b))
    def bw(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 1:
            return (g * bv, g * av)
        if av.ndim == 1:      # (k,) @ (k,n) -> (n,)
            return (g @ bv.T, np.outer(av, g))
        if bv.ndim == 1:      # (m,k) @ (k,) -> (m,)
            return (np.outer(g, bv), av.T @ g)
        return (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g)
    out._backward = bw
    return out


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.value for t in tensors], axis=axis),
                 parents=tuple(tensors))
    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def hard_min(x, axis):
    """Min with subgradient routed to the (first) argmin."""
    x = as_tensor(x)
    idx = np.argmin(x.value, axis=axis)
    v = np.min(x.value, axis=axis)
    out = Tensor(v, parents=(x,))
    def bw(g):
        full = np.zeros_like(x.value)
        ii = np.indices(v.shape)
        sel = list(ii)
        sel.insert(axis if axis >= 0 else x.value.ndim + axis, idx)
        full[tuple(sel)] = g
        return (full,)
    out._backward = bw
    return out


def hard_max(x, axis):
    return -hard_min(-as_tensor(x), axis)


def softmin(x, axis, temperature=1.0):
    """Smooth minimum: -T * logsumexp(-x / T)."""
    x = as_tensor(x)
    z = -x.value / temperature
    zmax = z.max(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=axis, keepdims=True)
    v = -temperature * (np.log(se) + zmax)
    w = e / se
    out = Tensor(np.squeeze(v, axis=axis), parents=(x,))
    out._backward = lambda g: (np.expand_dims(g, axis) * w,)
    return out


# -- tape traversal ---------------------------------------------------------

def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(output):
    """Propagate d(output)/d(leaf) for a scalar ``output`` node.

    Gradients accumulate in ``.grad`` of every node on the tape; parameters
    that do not participate keep ``grad = None`` (treated as zero).
    """
    if output.value.ndim != 0:
        raise ValueError("backward requires a scalar output node")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


def check_gradients(f, params, step=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of ``f`` with central finite differences.

    ``f`` maps a dict name -> Tensor to a scalar Tensor. ``params`` is a dict
    name -> ndarray giving the evaluation point. Returns a report dict with
    per-parameter max relative error and an overall pass flag.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = f(leaves)
    if not np.isfinite(out.value):
        raise FloatingPointError("non-finite objective at evaluation point")
    backward(out)

    report = {"per_param": {}, "passed": True, "tol": tol}
    for name, arr in params.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(np.asarray(arr, dtype=np.float64))
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        flat = np.asarray(arr, dtype=np.float64).reshape(-1).copy()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            for sgn, slot in ((1.0, 0), (-1.0, 1)):
                pert = dict(params)
                bumped = flat.copy()
                bumped[i] += sgn * step
                pert[name] = bumped.reshape(np.shape(arr))
                val = f({k: Tensor(v) for k, v in pert.items()}).value
                if not np.isfinite(val):
                    raise FloatingPointError(
                        f"non-finite value while perturbing {name!r}[{i}]")
                fd[i] += sgn * float(val)
            fd[i] /= 2.0 * step
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
        err = float(np.max(np.abs(analytic - fd) / denom)) if flat.size else 0.0
        report["per_param"][name] = err
        if err >= tol:
            report["passed"] = False
    report["max_error"] = max(report["per_param"].values(), default=0.0)
    return report
