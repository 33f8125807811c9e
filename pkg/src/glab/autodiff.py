"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive records a tape node holding its parents and a backward rule.
Backward rules are written with Tensor operations themselves, so running them
while recording (``create_graph=True``) yields gradients that are again
differentiable.  That is how the attack differentiates a function of parameter
gradients with respect to the input pixels.

Gradient accumulation into ``Tensor.grad`` is additive; call ``zero_grad`` (or
reset ``grad`` to ``None``) between iterations.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_state = {"record": True}
_seq = itertools.count()


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state["record"]
    _state["record"] = False
    try:
        yield
    finally:
        _state["record"] = prev


@contextmanager
def _recording(flag):
    prev = _state["record"]
    _state["record"] = flag
    try:
        yield
    finally:
        _state["record"] = prev


def is_recording():
    return _state["record"]


class Node:
    """One tape entry.  ``seq`` grows monotonically, so sorting reachable
    nodes by it in descending order is a valid reverse topological order."""

    __slots__ = ("seq", "parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.seq = next(_seq)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        s = tsum(self, axis, keepdims)
        return s * (s.size / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return transpose(self, tuple(axes) if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make(arr, parents, backward_fn, op):
    """Create the output tensor of a primitive and record it on the tape."""
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    if _state["record"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(tuple(parents), backward_fn, op)
    return out


def sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    r = tsum(g, axes, keepdims=True)
    return reshape(r, tuple(shape))


# -- primitives -----------------------------------------------------------------

def _conform(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b):
    a, b = _conform(a, b, "add")
    return make(a.data + b.data, (a, b),
                lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def neg(a):
    return make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = _conform(a, b, "mul")
    return make(a.data * b.data, (a, b),
                lambda g: (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                           sum_to(mul(g, a), b.shape) if b.requires_grad else None),
                "mul")


def div(a, b):
    a, b = _conform(a, b, "div")

    def bw(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    with np.errstate(all="ignore"):
        val = a.data / b.data
    return make(val, (a, b), bw, "div")


def power(a, p):
    p = float(p)
    with np.errstate(all="ignore"):
        val = a.data ** p
    return make(val, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),), "pow")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects [m,k] @ [k,n], got {a.shape} @ {b.shape}")
    return make(a.data @ b.data, (a, b),
                lambda g: (matmul(g, transpose(b, None)) if a.requires_grad else None,
                           matmul(transpose(a, None), g) if b.requires_grad else None),
                "matmul")


def tsum(a, axis=None, keepdims=False):
    if isinstance(axis, int):
        axis = (axis,)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims and axis is not None:
            kshape = list(shape)
            for ax in axis:
                kshape[ax % len(shape)] = 1
            g = reshape(g, tuple(kshape))
        elif not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def broadcast_to(a, shape):
    shape = tuple(shape)
    src = a.shape
    return make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,),
                lambda g: (sum_to(g, src),), "broadcast_to")


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {shape}") from exc
    return make(out, (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (transpose(g, inv),), "transpose")


def getitem(a, idx):
    src = a.shape
    return make(np.array(a.data[idx]), (a,), lambda g: (scatter(g, src, idx),), "getitem")


def scatter(g, shape, idx):
    """Place ``g`` at ``idx`` inside a zero tensor of ``shape`` (adjoint of getitem)."""
    out = np.zeros(shape)
    if _is_advanced(idx):
        np.add.at(out, idx, g.data)
    else:
        out[idx] = g.data
    return make(out, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            outs.append(getitem(g, tuple(idx)) if t.requires_grad else None)
        return tuple(outs)

    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def exp(a):
    out = None

    def bw(g):
        return (mul(g, out),)

    out = make(np.exp(a.data), (a,), bw, "exp")
    return out


def log(a):
    with np.errstate(all="ignore"):
        val = np.log(a.data)
    return make(val, (a,), lambda g: (div(g, a),), "log")


def sqrt(a):
    out = None

    def bw(g):
        return (div(mul(g, 0.5), out),)

    with np.errstate(all="ignore"):
        val = np.sqrt(a.data)
    out = make(val, (a,), bw, "sqrt")
    return out


def tabs(a):
    sign = Tensor._wrap(np.sign(a.data))
    return make(np.abs(a.data), (a,), lambda g: (mul(g, sign),), "abs")


def relu(a):
    mask = Tensor._wrap((a.data > 0).astype(np.float64))
    return make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = None

    def bw(g):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    out = make(_sigmoid_np(a.data), (a,), bw, "sigmoid")
    return out


def softplus(a):
    x = a.data
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make(val, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


# -- backward driver --------------------------------------------------------------

def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t.node.parents)
    return sorted(seen.values(), key=lambda t: t.node.seq, reverse=True)


def _propagate(root, seed, create_graph, retain_graph):
    """Run the chain rule from ``root``; returns {id(leaf): (leaf, grad Tensor)}."""
    order = _reachable(root)
    grads = {id(root): (root, seed)}
    leaves = {}
    with _recording(create_graph):
        for t in order:
            entry = grads.pop(id(t), None)
            if entry is None:
                continue
            node = t.node
            if node.backward_fn is None:
                raise GraphError(
                    f"tape node '{node.op}' was already consumed by a backward pass; "
                    "pass retain_graph=True to traverse it again")
            pgrads = node.backward_fn(entry[1])
            for p, gp in zip(node.parents, pgrads):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                target = leaves if p.node is None else grads
                prev = target.get(key)
                target[key] = (p, gp if prev is None else add(prev[1], gp))
        if root.node is None and root.requires_grad:
            leaves[id(root)] = (root, seed)
    if not (retain_graph or create_graph):
        for t in order:
            t.node.backward_fn = None
    return leaves


def _scalar_seed(out):
    if out.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        raise GraphError("backward called on a tensor that is not on a live tape")
    return Tensor._wrap(np.ones_like(out.data))


def backward(out, retain_graph=False):
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    leaves = _propagate(out, _scalar_seed(out), False, retain_graph)
    for leaf, g in leaves.values():
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(out, inputs, create_graph=False, retain_graph=None, allow_unused=True):
    """Return d(out)/d(input) for each input as Tensors, leaving ``.grad`` alone.

    With ``create_graph=True`` the returned gradients are themselves on the tape.
    Inputs that ``out`` does not depend on get a zero tensor.
    """
    if retain_graph is None:
        retain_graph = create_graph
    seed = _scalar_seed(out)
    inputs = list(inputs)
    # Treat requested inputs as leaves even if they are interior nodes.
    saved = [(t, t.node) for t in inputs]
    for t in inputs:
        t.node = None
    try:
        leaves = _propagate(out, seed, create_graph, retain_graph)
    finally:
        for t, node in saved:
            t.node = node
    result = []
    for t in inputs:
        hit = leaves.get(id(t))
        if hit is None:
            if not allow_unused:
                raise GraphError("an input was not used to compute the output")
            result.append(Tensor._wrap(np.zeros(t.shape)))
        else:
            result.append(hit[1])
    return result


def grad_of_grads(pixels, loss_fn, params, objective):
    """Differentiate a function of parameter gradients with respect to pixels.

    ``loss_fn(pixels)`` returns the scalar training loss, ``params`` are the
    requires_grad parameter tensors it uses, and ``objective(grads)`` maps the
    list of parameter gradients to a scalar.  Returns ``(d objective / d pixels,
    objective value)``.
    """
    if not pixels.requires_grad:
        pixels.requires_grad = True
    loss = loss_fn(pixels)
    grads = grad(loss, params, create_graph=True)
    value = objective(grads)
    if not value.requires_grad:
        return Tensor._wrap(np.zeros(pixels.shape)), value.item()
    (gx,) = grad(value, [pixels])
    _check_finite(gx.data, "grad_of_grads")
    return gx.detach(), value.item()
