"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable computation in the engine runs through the :class:`Tensor`
class below. Values are numpy float64 arrays; each non-leaf tensor records
its parents and a backward rule, so the graph is rebuilt dynamically on
every step. ``backward`` walks the recorded operations once, in reverse
topological order, and accumulates gradients into the ``grad`` buffers of
every leaf that has ``requires_grad`` set.

Broadcasting follows numpy rules; gradients of broadcast inputs are reduced
back to the input shape. ``relu`` and ``abs`` use subgradient 0 at their
kinks. Gradients accumulate across ``backward`` calls until ``zero_grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradcheckError",
    "no_grad",
    "grad_enabled",
    "from_op",
    "backward",
    "backward_from",
    "gradcheck",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "absolute",
    "maximum",
    "max_const",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "broadcast_to",
]

_grad_enabled = True


def grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable operation recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GradcheckError(RuntimeError):
    """Raised when gradcheck meets a non-finite value; carries the coordinate."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class Tensor:
    """A dense float64 array participating in the differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        v = np.asarray(values, dtype=np.float64)
        if not v.flags.c_contiguous:
            v = np.ascontiguousarray(v)
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # operator sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return _slice(self, key)


def constant(values):
    return Tensor(values, requires_grad=False)


def parameter(values):
    return Tensor(values, requires_grad=True)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def from_op(values, parents, backward_fn):
    """Create an op output; records the backward rule when grads are needed.

    ``backward_fn(out_grad)`` must accumulate into the parents via
    :func:`accumulate`. This is the extension point used by the volume and
    renderer modules to register their custom operations
    (gather_trilinear, scatter-mean pooling, the 3x3x3 convolution, the
    occlusion-aware ray weights).
    """
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(values)


def accumulate(tensor, grad):
    """Add ``grad`` into ``tensor.grad`` if the tensor tracks gradients."""
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros(tensor.values.shape)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Graph:
    """Reachable recorded operations in topological order (inputs first)."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root, stop_at=frozenset()):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if id(node) not in stop_at:
                for p in node._parents:
                    if p.requires_grad and id(p) not in visited:
                        stack.append((p, False))
        return cls(order)


def backward(root, stop_at=()):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf.

    ``root`` must be scalar. ``stop_at`` tensors are treated as leaves: their
    gradients are accumulated but their ancestry is not visited (used to
    split one logical backward pass into shards; see ``backward_from``).
    Intermediate gradients are freed as soon as they have been propagated.
    """
    if root.values.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.values.shape}")
    if not root.requires_grad:
        return
    stop_ids = frozenset(id(t) for t in stop_at)
    graph = Graph.trace(root, stop_ids)
    accumulate(root, np.ones(root.values.shape))
    _propagate(reversed(graph.nodes), stop_ids)


def backward_from(tensors):
    """Continue a sharded backward pass from tensors holding accumulated grads."""
    seeds = [t for t in tensors if t.requires_grad and t.grad is not None]
    if not seeds:
        return
    head = Tensor(0.0, requires_grad=True)
    head._parents = tuple(seeds)
    head._backward = lambda g: None
    graph = Graph.trace(head)
    _propagate((n for n in reversed(graph.nodes) if n is not head), frozenset())


def _propagate(nodes, stop_ids):
    for node in nodes:
        if node.grad is None or node._backward is None or id(node) in stop_ids:
            continue
        node._backward(node.grad)
        if node._parents:
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural operations


def _binary_values(a, b, opname):
    try:
        return np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.values.shape} and {b.values.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = _lift(a), _lift(b)
    _binary_values(a, b, "add")
    out_v = a.values + b.values

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.values.shape))
        accumulate(b, _unbroadcast(g, b.values.shape))

    return from_op(out_v, (a, b), bwd)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _binary_values(a, b, "sub")
    out_v = a.values - b.values

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.values.shape))
        accumulate(b, _unbroadcast(-g, b.values.shape))

    return from_op(out_v, (a, b), bwd)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _binary_values(a, b, "mul")
    out_v = a.values * b.values

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return from_op(out_v, (a, b), bwd)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _binary_values(a, b, "div")
    out_v = a.values / b.values

    def bwd(g):
        accumulate(a, _unbroadcast(g / b.values, a.values.shape))
        accumulate(b, _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return from_op(out_v, (a, b), bwd)


def neg(a):
    out_v = -a.values

    def bwd(g):
        accumulate(a, -g)

    return from_op(out_v, (a,), bwd)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.values.shape} @ {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.values.shape} @ {b.values.shape}"
        )
    out_v = a.values @ b.values

    def bwd(g):
        accumulate(a, g @ b.values.T)
        accumulate(b, a.values.T @ g)

    return from_op(out_v, (a, b), bwd)


def relu(a):
    out_v = np.maximum(a.values, 0.0)

    def bwd(g):
        accumulate(a, g * (a.values > 0.0))

    return from_op(out_v, (a,), bwd)


def softplus(a):
    # stable: log(1+e^x) = max(x,0) + log1p(e^-|x|)
    v = a.values
    out_v = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def bwd(g):
        accumulate(a, g * _sigmoid_values(v))

    return from_op(out_v, (a,), bwd)


def _sigmoid_values(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a):
    out_v = _sigmoid_values(a.values)

    def bwd(g):
        accumulate(a, g * out_v * (1.0 - out_v))

    return from_op(out_v, (a,), bwd)


def exp(a):
    out_v = np.exp(a.values)

    def bwd(g):
        accumulate(a, g * out_v)

    return from_op(out_v, (a,), bwd)


def log(a):
    out_v = np.log(a.values)

    def bwd(g):
        accumulate(a, g / a.values)

    return from_op(out_v, (a,), bwd)


def sqrt(a):
    out_v = np.sqrt(a.values)

    def bwd(g):
        accumulate(a, g / (2.0 * out_v))

    return from_op(out_v, (a,), bwd)


def sin(a):
    out_v = np.sin(a.values)

    def bwd(g):
        accumulate(a, g * np.cos(a.values))

    return from_op(out_v, (a,), bwd)


def cos(a):
    out_v = np.cos(a.values)

    def bwd(g):
        accumulate(a, -g * np.sin(a.values))

    return from_op(out_v, (a,), bwd)


def absolute(a):
    out_v = np.abs(a.values)

    def bwd(g):
        accumulate(a, g * np.sign(a.values))

    return from_op(out_v, (a,), bwd)


def maximum(a, b):
    """Elementwise max of two tensors; ties route the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _binary_values(a, b, "maximum")
    out_v = np.maximum(a.values, b.values)

    def bwd(g):
        take_a = a.values >= b.values
        accumulate(a, _unbroadcast(g * take_a, a.values.shape))
        accumulate(b, _unbroadcast(g * ~take_a, b.values.shape))

    return from_op(out_v, (a, b), bwd)


def max_const(a, c):
    """max(a, c) with a scalar constant; subgradient 0 at the kink."""
    c = float(c)
    out_v = np.maximum(a.values, c)

    def bwd(g):
        accumulate(a, g * (a.values > c))

    return from_op(out_v, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    out_v = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.values.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            accumulate(a, np.broadcast_to(gg, a.values.shape))

    return from_op(out_v, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.values.size
    else:
        n = a.values.shape[axis]
    out_v = a.values.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g / n, a.values.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            accumulate(a, np.broadcast_to(gg / n, a.values.shape))

    return from_op(out_v, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out_v = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate(t, piece)

    return from_op(out_v, tuple(tensors), bwd)


def _slice(a, key):
    out_v = a.values[key]
    if isinstance(out_v, np.ndarray) and out_v.base is not None:
        out_v = out_v.copy()

    def bwd(g):
        full = np.zeros(a.values.shape)
        full[key] = g
        accumulate(a, full)

    return from_op(out_v, (a,), bwd)


def reshape(a, shape):
    out_v = a.values.reshape(shape)

    def bwd(g):
        accumulate(a, g.reshape(a.values.shape))

    return from_op(out_v, (a,), bwd)


def broadcast_to(a, shape):
    out_v = np.broadcast_to(a.values, shape).copy()

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.values.shape))

    return from_op(out_v, (a,), bwd)


# ---------------------------------------------------------------------------
# finite-difference verification


def gradcheck(fn, point, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. The error at coordinate i is
    |analytic - fd| / max(1, |analytic|, |fd|); the maximum over all
    coordinates is returned. Non-finite values raise :class:`GradcheckError`
    with the offending coordinate. Inputs sitting exactly on kinks (relu,
    abs, max) are the caller's responsibility to nudge.
    """
    if eps <= 0:
        raise ValueError("gradcheck epsilon must be positive")
    base = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.values.size != 1:
        raise ValueError("gradcheck function must return a scalar tensor")
    backward(out)
    analytic = np.zeros(base.shape) if x.grad is None else x.grad.copy()
    flat_analytic = analytic.reshape(-1)

    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(Tensor(base)).values)
            flat[i] = orig - eps
            fm = float(fn(Tensor(base)).values)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            ana = flat_analytic[i]
            if not (np.isfinite(fd) and np.isfinite(ana)):
                raise GradcheckError(
                    f"non-finite gradient at coordinate {i}: analytic={ana}, fd={fd}",
                    index=i,
                )
            err = abs(ana - fd) / max(1.0, abs(ana), abs(fd))
            if err > worst:
                worst = err
    return worst
