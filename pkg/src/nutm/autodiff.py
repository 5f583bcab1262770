"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every differentiable computation in the package composes from this closed
set of primitives:

    add, sub, mul, div, neg, matmul, reduce_sum, exp, log, tanh, sigmoid,
    softplus, power, softmax, cosine_similarity, circular_convolve, concat,
    reshape, take, frobenius_norm, bce_with_logits, straight_through

Each primitive records its parents and a rule name; the vector-Jacobian
products live in ``VJP`` keyed by that name, so a rule can be inspected or
swapped (the gradient checker relies on this for fault injection).

A graph is rebuilt for every sequence. Arrays carry an optional leading
batch dimension and broadcast like numpy.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NORM_GUARD = 1e-12

SHIFT_OFFSETS = (-1, 0, 1)


def _roll_last(x: np.ndarray, shift: int) -> np.ndarray:
    """np.roll along the last axis for shifts in {-1, 0, 1}."""
    if shift == 0 or x.shape[-1] == 1:
        return x
    if shift == 1:
        return np.concatenate((x[..., -1:], x[..., :-1]), axis=-1)
    return np.concatenate((x[..., 1:], x[..., :1]), axis=-1)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class Tensor:
    """A node in the computation record: a value plus how it was produced."""

    __slots__ = ("data", "grad", "parents", "op", "ctx", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = ()
        self.op = None
        self.ctx = None
        self.requires_grad = requires_grad
        self.name = name

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

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(op: str, value: np.ndarray, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out.op = op
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out.parents = tuple(parents)
            out.ctx = ctx
            return out
    # constant subgraph: nothing to differentiate, drop the record
    out.requires_grad = False
    out.parents = ()
    out.ctx = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, fn, a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return _node(op, value, (a, b))


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    return _binary("add", np.add, a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", np.subtract, a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", np.multiply, a, b)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    return _binary("div", np.divide, a, b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    return _node("matmul", a.data @ b.data, (a, b))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    return _node("reduce_sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


# -- nonlinearities -------------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    return _node("exp", np.exp(x.data), (x,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _node("log", np.log(x.data), (x,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _node("tanh", np.tanh(x.data), (x,))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    return _node("sigmoid", _sigmoid(x.data), (x,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _node("softplus", np.logaddexp(0.0, x.data), (x,))


def power(x, y) -> Tensor:
    """Elementwise ``x ** y`` for ``x >= 0`` with a differentiable exponent."""
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast("power", x, y)
    if np.any(x.data < 0):
        raise DomainError("power: base must be non-negative")
    return _node("power", np.power(x.data, y.data), (x, y))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    return _node("softmax", e / np.sum(e, axis=axis, keepdims=True), (x,), axis)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes.

    Norms are floored at ``NORM_GUARD`` so zero vectors give 0 instead of NaN.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: vector widths differ, {a.shape} vs {b.shape}")
    _check_broadcast("cosine_similarity", a, b)
    na = np.maximum(np.sqrt(np.sum(a.data * a.data, axis=-1)), NORM_GUARD)
    nb = np.maximum(np.sqrt(np.sum(b.data * b.data, axis=-1)), NORM_GUARD)
    dot = np.sum(a.data * b.data, axis=-1)
    value = dot / (na * nb)
    return _node("cosine_similarity", value, (a, b), (na, nb))


def circular_convolve(w, s) -> Tensor:
    """Rotate ``w`` by offsets (-1, 0, +1) weighted by ``s`` (last axis, length 3).

    out[i] = sum_j w[(i - offset_j) mod N] * s[j]
    """
    w, s = as_tensor(w), as_tensor(s)
    if s.shape[-1] != len(SHIFT_OFFSETS):
        raise ShapeError(f"circular_convolve: shift kernel must have length 3, got {s.shape}")
    try:
        np.broadcast_shapes(w.shape[:-1], s.shape[:-1])
    except ValueError:
        raise ShapeError(f"circular_convolve: leading shapes differ, {w.shape} vs {s.shape}") from None
    out = 0.0
    for j, off in enumerate(SHIFT_OFFSETS):
        out = out + s.data[..., j:j + 1] * _roll_last(w.data, off)
    return _node("circular_convolve", np.asarray(out), (w, s))


# -- structure -------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _node("concat", value, tensors, (axis, sizes))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _node("reshape", value, (x,))


def take(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    return _node("take", x.data[index], (x,), index)


def frobenius_norm(x) -> Tensor:
    x = as_tensor(x)
    value = np.sqrt(np.sum(x.data * x.data))
    return _node("frobenius_norm", np.asarray(value), (x,))


# -- losses and estimators ----------------------------------------------------------

def bce_with_logits(logits, targets, mask=None) -> Tensor:
    """Summed binary cross-entropy between sigmoid(logits) and targets.

    ``targets`` and ``mask`` are constants; ``mask`` broadcasts against logits.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    m = np.ones_like(t) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), t.shape)
    x = logits.data
    per_bit = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _node("bce_with_logits", np.asarray(np.sum(per_bit * m)), (logits,), (t, m))


def straight_through(soft, hard) -> Tensor:
    """Forward value ``hard`` (a constant), gradient passed unchanged to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {soft.shape} vs {hard.shape}")
    return _node("straight_through", hard.copy(), (soft,))


# -- vector-Jacobian products ---------------------------------------------------------

def _vjp_add(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def _vjp_sub(node, g):
    a, b = node.parents
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def _vjp_mul(node, g):
    a, b = node.parents
    ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def _vjp_div(node, g):
    a, b = node.parents
    ga = g / b.data
    return unbroadcast(ga, a.shape), unbroadcast(-ga * node.data, b.shape)


def _vjp_neg(node, g):
    return (-g,)


def _vjp_matmul(node, g):
    a, b = node.parents
    ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
    gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
    return ga, gb


def _vjp_reduce_sum(node, g):
    (x,) = node.parents
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _vjp_exp(node, g):
    return (g * node.data,)


def _vjp_log(node, g):
    return (g / node.parents[0].data,)


def _vjp_tanh(node, g):
    return (g * (1.0 - node.data * node.data),)


def _vjp_sigmoid(node, g):
    return (g * node.data * (1.0 - node.data),)


def _vjp_softplus(node, g):
    return (g * _sigmoid(node.parents[0].data),)


def _vjp_power(node, g):
    x, y = node.parents
    gx = None
    if x.requires_grad:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = y.data * np.power(x.data, y.data - 1.0)
        d = np.where((x.data == 0) & (y.data >= 1), np.where(y.data == 1, 1.0, 0.0), d)
        gx = unbroadcast(g * d, x.shape)
    gy = None
    if y.requires_grad:
        safe = np.where(x.data > 0, x.data, 1.0)
        d = np.where(x.data > 0, node.data * np.log(safe), 0.0)
        gy = unbroadcast(g * d, y.shape)
    return gx, gy


def _vjp_softmax(node, g):
    axis = node.ctx
    s = node.data
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


def _vjp_cosine_similarity(node, g):
    a, b = node.parents
    na, nb = node.ctx
    inv = (g / (na * nb))[..., None]
    ga = gb = None
    # norm terms only contribute where the guard is inactive
    if a.requires_grad:
        ca = np.where(na > NORM_GUARD, g * node.data / (na * na), 0.0)[..., None]
        ga = unbroadcast(inv * b.data - ca * a.data, a.shape)
    if b.requires_grad:
        cb = np.where(nb > NORM_GUARD, g * node.data / (nb * nb), 0.0)[..., None]
        gb = unbroadcast(inv * a.data - cb * b.data, b.shape)
    return ga, gb


def _vjp_circular_convolve(node, g):
    w, s = node.parents
    gw = 0.0
    gs = []
    for j, off in enumerate(SHIFT_OFFSETS):
        gw = gw + s.data[..., j:j + 1] * _roll_last(g, -off)
        gs.append(np.sum(g * _roll_last(w.data, off), axis=-1, keepdims=True))
    gs = np.concatenate(np.broadcast_arrays(*gs), axis=-1)
    return unbroadcast(np.asarray(gw), w.shape), unbroadcast(gs, s.shape)


def _vjp_concat(node, g):
    axis, sizes = node.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _vjp_reshape(node, g):
    return (g.reshape(node.parents[0].shape),)


def _vjp_take(node, g):
    (x,) = node.parents
    out = np.zeros(x.shape)
    out[node.ctx] = g
    return (out,)


def _vjp_frobenius_norm(node, g):
    (x,) = node.parents
    n = float(node.data)
    if n == 0.0:
        return (np.zeros(x.shape),)
    return (g * x.data / n,)


def _vjp_bce_with_logits(node, g):
    (x,) = node.parents
    t, m = node.ctx
    return (g * m * (_sigmoid(x.data) - t),)


def _vjp_straight_through(node, g):
    return (g,)


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "reduce_sum": _vjp_reduce_sum,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus,
    "power": _vjp_power,
    "softmax": _vjp_softmax,
    "cosine_similarity": _vjp_cosine_similarity,
    "circular_convolve": _vjp_circular_convolve,
    "concat": _vjp_concat,
    "reshape": _vjp_reshape,
    "take": _vjp_take,
    "frobenius_norm": _vjp_frobenius_norm,
    "bce_with_logits": _vjp_bce_with_logits,
    "straight_through": _vjp_straight_through,
}

PRIMITIVES = tuple(VJP)


def forward(node: Tensor) -> np.ndarray:
    """Return the value of ``node``; values are computed eagerly at construction."""
    return node.data


def _topological_order(root: Tensor) -> list:
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
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a mapping from leaf name to gradient array for named leaves.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar-valued, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape)}
    result = {}
    if not loss.requires_grad:
        return result
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                result[node.name] = node.grad
            continue
        parent_grads = VJP[node.op](node, g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return result


def finite_difference_check(builder: Callable[[list], Tensor], params: Iterable, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` maps a list of parameter tensors to a scalar loss tensor.
    The relative error of an entry is |analytic - numeric| / max(|numeric|, 1e-8).
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]

    def evaluate(values):
        return float(builder([Tensor(v) for v in values]).data)

    leaves = [Tensor(a.copy(), requires_grad=True, name=f"p{i}") for i, a in enumerate(arrays)]
    loss = builder(leaves)
    again = evaluate(arrays)
    if float(loss.data) != again:
        raise RuntimeError("finite_difference_check: builder is not deterministic")
    backward(loss)

    worst = 0.0
    for i, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = np.zeros(base.shape) if leaf.grad is None else leaf.grad
        flat = base.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + eps
            up = evaluate(arrays)
            flat[j] = saved - eps
            down = evaluate(arrays)
            flat[j] = saved
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
