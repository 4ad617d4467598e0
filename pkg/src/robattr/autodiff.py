"""Eager reverse-mode automatic differentiation with support for double backward.

Every primitive computes its value immediately and records a vector-Jacobian
product (VJP) closure.  The VJPs are themselves written with the primitives of
this module, so when :func:`grad` runs with ``create_graph=True`` the returned
gradients are ordinary graph nodes that can be differentiated again.  This is
what the robust attribution objectives need: they take norms of Integrated
Gradients, i.e. of sums of input gradients, and differentiate them with
respect to the input (attack step) or the parameters (gradient step).

Tensors are plain ``float64`` numpy arrays.  A :class:`Node` wraps one value
together with the bookkeeping needed to backpropagate through it.

Example::

    >>> x = variable(3.0)
    >>> (dx,) = grad(x * x, [x])
    >>> float(dx.value)
    6.0
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

__all__ = [
    "Tensor", "Node", "GradientTape", "ShapeError", "NonFiniteError",
    "constant", "variable", "track", "as_node", "no_grad", "is_recording",
    "grad", "stop_gradient",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "transpose", "reshape",
    "broadcast_to", "sum_to", "sum", "mean", "abs", "maximum", "max", "exp", "log",
    "relu", "softplus", "sigmoid", "clamp", "getitem", "softmax_cross_entropy",
    "logsumexp", "one_norm", "im2col", "col2im",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


_ids = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


def is_recording() -> bool:
    """True unless inside a :func:`no_grad` block."""
    return _recording()


@contextmanager
def no_grad():
    """Evaluate eagerly without recording any graph edges."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class GradientTape:
    """Records every node created while the tape is active.

    Nodes created while a nested :func:`grad` builds its backward graph land on
    the same tape; ``generation`` counts how many backward passes were recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False


def _active_tape() -> GradientTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Node:
    """A value in the computation graph.

    ``parents`` is empty for leaves and for anything computed while no operand
    required gradients.  Node ids grow with creation order, so parents always
    have smaller ids than their children.
    """

    __slots__ = ("id", "op", "value", "parents", "requires_grad", "_vjp", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, op: str = "const", parents: tuple = (), vjp=None,
                 requires_grad: bool = False):
        self.id = next(_ids)
        self.op = op
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self._vjp = vjp
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _to_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("constant")
    return arr


def constant(value) -> Node:
    """A leaf that never receives gradients."""
    if isinstance(value, Node):
        return Node(value.value)
    return Node(_to_array(value))


def variable(value) -> Node:
    """A leaf that gradients can be taken with respect to."""
    if isinstance(value, Node):
        value = value.value
    return Node(_to_array(value).copy(), op="leaf", requires_grad=True)


def as_node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _make(op: str, value: np.ndarray, parents: Sequence[Node], vjp) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    if _recording() and any(p.requires_grad for p in parents):
        return Node(value, op, tuple(parents), vjp, True)
    return Node(value, op)


def track(x) -> Node:
    """Identity that always requires grad, so gradients w.r.t. it can be taken.

    Unlike :func:`variable`, the result stays connected to ``x``: gradients
    flowing into it continue on to whatever ``x`` depends on.
    """
    x = as_node(x)
    if not _recording():
        return Node(x.value, "leaf", requires_grad=True)
    parents = (x,) if x.requires_grad else ()
    return Node(x.value, "track", parents, lambda node, g, needs: (g,), True)


def stop_gradient(x) -> Node:
    """Pass the value through and block every derivative contribution."""
    x = as_node(x)
    return Node(x.value, "stop_gradient")


# -- broadcasting helpers ---------------------------------------------------

def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(op, *shapes) from None


def _reduce_to(value: np.ndarray, shape: tuple) -> np.ndarray:
    if value.shape == shape:
        return value
    lead = value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and value.shape[i + lead] != 1)
    out = value.sum(axis=axes, keepdims=True) if axes else value
    return out.reshape(shape)


def broadcast_to(x, shape) -> Node:
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    src = x.shape

    def vjp(node, g, needs):
        return (sum_to(g, src),)
    return _make("broadcast_to", value, (x,), vjp)


def sum_to(x, shape) -> Node:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def vjp(node, g, needs):
        return (broadcast_to(g, src),)
    return _make("sum_to", _reduce_to(x.value, shape), (x,), vjp)


def _unbroadcast(g: Node, shape: tuple) -> Node:
    return g if g.shape == shape else sum_to(g, shape)


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a.shape, b.shape)

    def vjp(node, g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return _make("add", a.value + b.value, (a, b), vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def vjp(node, g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(neg(g), b.shape) if needs[1] else None)
    return _make("sub", a.value - b.value, (a, b), vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def vjp(node, g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)
    return _make("mul", a.value * b.value, (a, b), vjp)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value

    def vjp(node, g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb
    return _make("div", value, (a, b), vjp)


def neg(a) -> Node:
    a = as_node(a)
    return _make("neg", -a.value, (a,), lambda node, g, needs: (neg(g),))


def maximum(a, b) -> Node:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape("maximum", a.shape, b.shape)
    mask = (a.value >= b.value).astype(np.float64)

    def vjp(node, g, needs):
        return (_unbroadcast(mul(g, mask), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, 1.0 - mask), b.shape) if needs[1] else None)
    return _make("maximum", np.maximum(a.value, b.value), (a, b), vjp)


# -- elementwise unary -------------------------------------------------------

def power(a, p: float) -> Node:
    a = as_node(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value ** p

    def vjp(node, g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)
    return _make("power", value, (a,), vjp)


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _make("exp", value, (a,), lambda node, g, needs: (mul(g, node),))


def log(a) -> Node:
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a,), lambda node, g, needs: (div(g, a),))


def abs(a) -> Node:
    """Absolute value; the derivative at 0 is 0 and the second derivative is 0."""
    a = as_node(a)
    sign = np.sign(a.value)
    return _make("abs", np.abs(a.value), (a,), lambda node, g, needs: (mul(g, sign),))


def relu(a) -> Node:
    """max(a, 0); the derivative at 0 is 0 and the second derivative is 0."""
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)
    return _make("relu", a.value * mask, (a,), lambda node, g, needs: (mul(g, mask),))


def _sigmoid_value(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(a) -> Node:
    a = as_node(a)

    def vjp(node, g, needs):
        return (mul(g, mul(node, sub(1.0, node))),)
    return _make("sigmoid", _sigmoid_value(a.value), (a,), vjp)


def softplus(a) -> Node:
    """ln(1 + exp(a)), evaluated stably."""
    a = as_node(a)
    return _make("softplus", np.logaddexp(0.0, a.value), (a,),
                 lambda node, g, needs: (mul(g, sigmoid(a)),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Node:
    """Clip to [lo, hi]; gradient passes where lo <= a <= hi."""
    a = as_node(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    mask = ((a.value >= lo_) & (a.value <= hi_)).astype(np.float64)
    return _make("clamp", np.clip(a.value, lo_, hi_), (a,),
                 lambda node, g, needs: (mul(g, mask),))


# -- shape and linear algebra -----------------------------------------------

def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _make("reshape", value, (a,), lambda node, g, needs: (reshape(g, src),))


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.value, axes), (a,),
                 lambda node, g, needs: (transpose(g, inverse),))


def _matmul2d(a: Node, b: Node) -> Node:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(node, g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)
    with np.errstate(over="ignore", invalid="ignore"):
        value = a.value @ b.value
    return _make("matmul", value, (a, b), vjp)


def matmul(a, b) -> Node:
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    a, b = as_node(a), as_node(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape, detail="only 1-D and 2-D supported")
    a2 = reshape(a, (1, a.shape[0])) if a.ndim == 1 else a
    b2 = reshape(b, (b.shape[0], 1)) if b.ndim == 1 else b
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _matmul2d(a2, b2)
    if a.ndim == 1 and b.ndim == 1:
        return reshape(out, ())
    if a.ndim == 1:
        return reshape(out, (b.shape[1],))
    if b.ndim == 1:
        return reshape(out, (a.shape[0],))
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    value = a.value.sum(axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(node, g, needs):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)
    return _make("sum", np.asarray(value, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    """Max reduction; tied maxima share the gradient equally."""
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    top = a.value.max(axis=axes, keepdims=True)
    hit = (a.value == top).astype(np.float64)
    weights = hit / hit.sum(axis=axes, keepdims=True)
    value = top if keepdims else top.reshape([s for i, s in enumerate(a.shape) if i not in axes])
    src = a.shape
    kept = top.shape

    def vjp(node, g, needs):
        if not keepdims:
            g = reshape(g, kept)
        return (mul(broadcast_to(g, src), weights),)
    return _make("max", np.asarray(value, dtype=np.float64), (a,), vjp)


def _scatter(g, idx, shape) -> Node:
    """Adjoint of indexing: place ``g`` into zeros of ``shape`` at ``idx``."""
    g = as_node(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)
    return _make("scatter", out, (g,), lambda node, gg, needs: (getitem(gg, idx),))


def getitem(a, idx) -> Node:
    a = as_node(a)
    try:
        value = np.array(a.value[idx], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("getitem", a.shape, detail=str(exc)) from None
    src = a.shape
    return _make("getitem", value, (a,), lambda node, g, needs: (_scatter(g, idx, src),))


# -- convolution helpers -------------------------------------------------------

def _im2col_value(x: np.ndarray, k: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C, k, k)
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def _col2im_value(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros(shape)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + ho, dj:dj + wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out


def im2col(x, k: int) -> Node:
    """Valid, stride-1 patches of an (N, C, H, W) input as (N, Ho, Wo, C*k*k)."""
    x = as_node(x)
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError("im2col", x.shape, detail=f"kernel {k}")
    src = x.shape
    return _make("im2col", _im2col_value(x.value, k), (x,),
                 lambda node, g, needs: (col2im(g, src, k),))


def col2im(cols, shape, k: int) -> Node:
    """Adjoint of :func:`im2col`: overlapping patches are summed back."""
    cols = as_node(cols)
    shape = tuple(shape)
    return _make("col2im", _col2im_value(cols.value, shape, k), (cols,),
                 lambda node, g, needs: (im2col(g, k),))


# -- composites -------------------------------------------------------------

def logsumexp(a, axis=-1) -> Node:
    a = as_node(a)
    shift = stop_gradient(max(a, axis=axis, keepdims=True))
    out = add(log(sum(exp(sub(a, shift)), axis=axis, keepdims=True)), shift)
    return reshape(out, [s for i, s in enumerate(a.shape) if i != axis % a.ndim])


def softmax_cross_entropy(logits, labels) -> Node:
    """Per-row ``-log softmax(logits)[label]`` for (N, C) logits and N int labels."""
    logits = as_node(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels.astype(int)] = 1.0
    picked = sum(mul(logits, onehot), axis=1)
    return sub(logsumexp(logits, axis=1), picked)


def one_norm(a, axis=None) -> Node:
    return sum(abs(a), axis=axis)


# -- differentiation --------------------------------------------------------

def _ancestors(output: Node) -> list[Node]:
    seen = {output.id: output}
    stack = [output]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n.id)


def grad(output: Node, wrt: Sequence[Node] | Node, create_graph: bool = True) -> list[Node]:
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the result nodes are part of the graph and can be
    differentiated again.  A ``wrt`` node that ``output`` does not depend on
    gets a zero gradient of matching shape.
    """
    if isinstance(wrt, Node):
        wrt = [wrt]
    output = as_node(output)
    if output.size != 1:
        raise ShapeError("grad", output.shape, detail="output must be scalar")
    for w in wrt:
        if not w.requires_grad:
            raise ValueError(f"grad: {w!r} does not require grad")
    tape = _active_tape()
    if tape is not None and create_graph:
        tape.generation += 1

    targets = {w.id for w in wrt}
    order = _ancestors(output) if output.requires_grad else [output]
    # keep only nodes lying on some path from a wrt node to the output
    relevant: dict[int, bool] = {}
    for node in order:
        relevant[node.id] = node.id in targets or any(relevant.get(p.id, False) for p in node.parents)

    prev = _recording()
    _state.recording = bool(create_graph)
    try:
        grads: dict[int, Node] = {output.id: constant(np.ones(output.shape))}
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or not node.parents or not relevant[node.id]:
                continue
            needs = tuple(relevant.get(p.id, False) and p.requires_grad for p in node.parents)
            if not any(needs):
                continue
            contribs = node._vjp(node, g, needs)
            for p, need, gp in zip(node.parents, needs, contribs):
                if not need or gp is None:
                    continue
                if gp.shape != p.shape:
                    gp = _unbroadcast(gp, p.shape)
                grads[p.id] = add(grads[p.id], gp) if p.id in grads else gp
        out = []
        for w in wrt:
            g = grads.get(w.id)
            out.append(g if g is not None else constant(np.zeros(w.shape)))
        return out
    finally:
        _state.recording = prev


def value_and_grad(fn: Callable[..., Node], *args, create_graph: bool = False):
    """Evaluate ``fn`` on fresh variables and return its value and gradients."""
    leaves = [variable(a) for a in args]
    out = fn(*leaves)
    return out.value, [g.value for g in grad(out, leaves, create_graph=create_graph)]

