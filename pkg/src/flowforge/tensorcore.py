"""Dense float64 tensors with reverse-mode automatic differentiation.

The operator set is closed: every differentiable computation in the package
(velocity network, losses, smooth reward scorers) is composed from the kinds
listed in ``OP_KINDS``. Broadcasting is limited to scalar-vs-tensor.
"""

from __future__ import annotations

import math

import numpy as np

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "square",
    "concat",
    "slice",
    "log",
    "exp",
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Row-major float64 array that refuses NaN/Inf."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, data={self.data.tolist()})"


class Node:
    """One vertex of the computation graph.

    Leaves are created with :func:`leaf` / :func:`const`; every other node is
    produced by :func:`forward_op` (or the thin wrappers below it).
    """

    __slots__ = ("op", "inputs", "attrs", "value", "grad", "requires_grad", "_id")
    _counter = 0

    def __init__(self, op, inputs, value, attrs=None, requires_grad=False):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.value = value
        self.grad = None
        if not requires_grad:
            for n in self.inputs:
                if n.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad
        Node._counter += 1
        self._id = Node._counter

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else None

    def numpy(self):
        return self.value

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Node(op={self.op}, shape={list(self.shape)})"


def _wrap(x):
    return x if isinstance(x, Node) else const(x)


_sum = np.add.reduce


def _all_finite(arr):
    # one reduction; a non-finite entry always makes the sum non-finite
    if math.isfinite(_sum(arr, None)):
        return True
    return bool(np.isfinite(arr).all())


def _array(x):
    if isinstance(x, Tensor):
        return x.data.copy()
    arr = np.array(x, dtype=np.float64)
    if not _all_finite(arr):
        raise ValueError("tensor values must be finite")
    return arr


def leaf(x, requires_grad=True):
    """Trainable (by default) input node."""
    return Node("leaf", (), _array(x), requires_grad=requires_grad)


def const(x):
    return Node("leaf", (), _array(x), requires_grad=False)


def _is_scalar(v):
    return v.size == 1


def _check_elementwise(kind, a, b):
    if a.shape == b.shape or _is_scalar(a.value) or _is_scalar(b.value):
        return
    raise ShapeError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} do not conform")


def _out_shape(a, b):
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(a.value) and not _is_scalar(b.value):
        return b.shape
    if _is_scalar(b.value) and not _is_scalar(a.value):
        return a.shape
    # both size one: keep the higher-rank shape
    return a.shape if a.value.ndim >= b.value.ndim else b.shape


def _bc(v, shape):
    if v.shape == shape:
        return v
    return np.broadcast_to(v.reshape(()), shape) if v.size == 1 else v


def _elementwise(fn):
    def run(kind, a, b, attrs):
        _check_elementwise(kind, a, b)
        shape = _out_shape(a, b)
        return np.array(fn(_bc(a.value, shape), _bc(b.value, shape))).reshape(shape)
    return run


def _matmul(kind, a, b, attrs):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    return a.value @ b.value


def _concat(kind, a, b, attrs):
    if a.value.ndim != b.value.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    return np.concatenate([a.value, b.value], axis=-1)


def _slice(kind, a, b, attrs):
    start, stop = int(attrs["start"]), int(attrs["stop"])
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] outside last axis of {list(a.shape)}")
    return a.value[..., start:stop].copy()


def _log(kind, a, b, attrs):
    if np.any(a.value <= 0):
        raise ValueError("log: input must be strictly positive")
    return np.log(a.value)


def _exp(kind, a, b, attrs):
    with np.errstate(over="ignore"):
        return np.exp(a.value)


# kind -> (arity, kernel, may produce non-finite values from finite inputs)
_KERNELS = {
    "add": (2, _elementwise(np.add), True),
    "sub": (2, _elementwise(np.subtract), True),
    "mul": (2, _elementwise(np.multiply), True),
    "scale": (1, lambda kind, a, b, attrs: a.value * float(attrs["alpha"]), True),
    "matmul": (2, _matmul, True),
    "tanh": (1, lambda kind, a, b, attrs: np.tanh(a.value), False),
    "relu": (1, lambda kind, a, b, attrs: np.maximum(a.value, 0.0), False),
    "sigmoid": (1, lambda kind, a, b, attrs: _sigmoid(a.value), False),
    "sum": (1, lambda kind, a, b, attrs: np.array(a.value.sum()), True),
    "mean": (1, lambda kind, a, b, attrs: np.array(a.value.mean()), True),
    "square": (1, lambda kind, a, b, attrs: a.value * a.value, True),
    "concat": (2, _concat, False),
    "slice": (1, _slice, False),
    "log": (1, _log, False),
    "exp": (1, _exp, True),
}


def forward_op(kind, inputs, **attrs):
    """Evaluate one operator and record it as a new graph node."""
    spec = _KERNELS.get(kind)
    if spec is None:
        raise ValueError(f"unknown operator kind {kind!r}")
    arity, kernel, check = spec
    inputs = tuple(inputs)
    if len(inputs) != arity:
        raise ValueError(f"{kind} takes {'two inputs' if arity == 2 else 'one input'}")
    out = kernel(kind, inputs[0], inputs[1] if arity == 2 else None, attrs)
    # node values are finite by induction, so only overflow-prone kernels need checking
    if check and not _all_finite(out):
        raise FloatingPointError(f"{kind}: non-finite result")
    return Node(kind, inputs, out, attrs)


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _reduce_to(g, shape):
    """Sum a broadcast gradient back to a scalar input's shape."""
    if g.shape == shape:
        return g
    return np.array(g.sum()).reshape(shape)


def _local_grads(node, g):
    kind = node.op
    ins = node.inputs
    if kind == "add":
        return [_reduce_to(g, ins[0].shape), _reduce_to(g, ins[1].shape)]
    if kind == "sub":
        return [_reduce_to(g, ins[0].shape), _reduce_to(-g, ins[1].shape)]
    if kind == "mul":
        a, b = ins[0].value, ins[1].value
        shape = node.shape
        return [_reduce_to(g * _bc(b, shape), ins[0].shape), _reduce_to(g * _bc(a, shape), ins[1].shape)]
    if kind == "scale":
        return [g * float(node.attrs["alpha"])]
    if kind == "matmul":
        a, b = ins[0].value, ins[1].value
        return [g @ b.T, a.T @ g]
    if kind == "tanh":
        return [g * (1.0 - node.value * node.value)]
    if kind == "relu":
        return [g * (ins[0].value > 0)]
    if kind == "sigmoid":
        return [g * node.value * (1.0 - node.value)]
    if kind == "sum":
        return [np.full(ins[0].shape, float(g))]
    if kind == "mean":
        n = ins[0].value.size
        return [np.full(ins[0].shape, float(g) / n)]
    if kind == "square":
        return [2.0 * ins[0].value * g]
    if kind == "concat":
        k = ins[0].shape[-1]
        return [g[..., :k], g[..., k:]]
    if kind == "slice":
        full = np.zeros(ins[0].shape)
        full[..., node.attrs["start"]:node.attrs["stop"]] = g
        return [full]
    if kind == "log":
        return [g / ins[0].value]
    if kind == "exp":
        return [g * node.value]
    raise AssertionError(kind)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for child in node.inputs:
            if child._id not in seen and child.requires_grad:
                stack.append((child, False))
    return order


def backward(loss, params=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict mapping each trainable leaf (or each node in ``params``) to
    its gradient array. Leaves that do not influence the loss get zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order = _topo(loss)
    grads = {loss._id: np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(node._id, None) if node.inputs else grads.get(node._id)
        if g is None:
            continue
        if not node.inputs:
            continue
        for child, cg in zip(node.inputs, _local_grads(node, g)):
            if not child.requires_grad:
                continue
            if child._id in grads:
                grads[child._id] = grads[child._id] + cg
            else:
                grads[child._id] = cg
    leaves = [n for n in order if not n.inputs and n.requires_grad]
    out = {}
    for n in leaves:
        n.grad = grads.get(n._id, np.zeros(n.shape))
        out[n] = n.grad
    if params is not None:
        out = {p: (p.grad if p._id in grads else np.zeros(p.shape)) for p in params}
        for p in params:
            if p._id not in grads:
                p.grad = np.zeros(p.shape)
    return out


def finite_diff_check(f, params, step=1e-5):
    """Largest |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a leaf node (built from ``params``) to a scalar node; it is
    evaluated once for the analytic gradient and twice per coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = _array(params)
    p = leaf(x0)
    out = f(p)
    analytic = backward(out, [p])[p]
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        fh = _scalar(f(const(hi.reshape(x0.shape))))
        fl = _scalar(f(const(lo.reshape(x0.shape))))
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        numeric[i] = (fh - fl) / (2.0 * step)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))


def _scalar(node):
    v = node.value if isinstance(node, Node) else np.asarray(node)
    return float(np.asarray(v).reshape(-1)[0])


# thin wrappers -------------------------------------------------------------

def add(a, b):
    return forward_op("add", (a, b))


def sub(a, b):
    return forward_op("sub", (a, b))


def mul(a, b):
    return forward_op("mul", (a, b))


def scale(a, alpha):
    return forward_op("scale", (a,), alpha=float(alpha))


def matmul(a, b):
    return forward_op("matmul", (a, b))


def tanh(a):
    return forward_op("tanh", (a,))


def relu(a):
    return forward_op("relu", (a,))


def sigmoid(a):
    return forward_op("sigmoid", (a,))


def sum_all(a):
    return forward_op("sum", (a,))


def mean(a):
    return forward_op("mean", (a,))


def square(a):
    return forward_op("square", (a,))


def concat(a, b):
    return forward_op("concat", (a, b))


def slice_last(a, start, stop):
    return forward_op("slice", (a,), start=start, stop=stop)


def log(a):
    return forward_op("log", (a,))


def exp(a):
    return forward_op("exp", (a,))
