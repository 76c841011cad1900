"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the differentiable ops defined in
this module, so gradients computed with ``create_graph=True`` are ordinary
graph nodes and can be differentiated again (double backprop, as needed by
the GradAlign penalty).

Nodes are appended to the active :class:`Tape` (if any) in creation order,
which is always a topological order of the graph.
"""

from __future__ import annotations

import itertools
import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "AutodiffError",
    "leaf",
    "constant",
    "no_grad",
    "grad_calls",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "bias_add",
    "conv2d",
    "im2col",
    "col2im",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "exp",
    "sqrt",
    "maximum",
    "relu",
    "softplus",
    "sigmoid",
    "activation",
    "log_softmax",
    "cross_entropy",
    "cos_sim",
    "cos_sim_rows",
]

COS_EPS = 1e-12

_ids = itertools.count()
_local = threading.local()


class AutodiffError(ValueError):
    pass


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.tape = None
        _local.counter = None
    return _local


class Node:
    """A value in the computation graph.

    ``vjp`` is only kept when the node requires grad. ``forward`` recomputes
    the value from the parents' values and is used by :meth:`Tape.replay`.
    """

    __slots__ = ("id", "op", "value", "parents", "requires_grad", "vjp", "forward")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, vjp=None, forward=None):
        self.id = next(_ids)
        self.op = op
        self.value = value
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.vjp = vjp if requires_grad else None
        self.forward = forward
        tape = _state().tape
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


class Tape:
    """Append-only record of every node created while the tape is active.

    >>> with Tape() as tape:
    ...     y = mul(leaf([2.0], True), leaf([3.0], True))
    >>> len(tape.nodes)
    3
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self):
        st = _state()
        self._prev = st.tape
        st.tape = self
        return self

    def __exit__(self, *exc):
        _state().tape = self._prev
        return False

    def replay(self) -> list[np.ndarray]:
        """Recompute every non-leaf node from its parents' recorded values.

        Returns the recomputed values in tape order; leaves are passed through.
        """
        values: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            if node.forward is None or not node.parents:
                v = node.value
            else:
                v = node.forward(*[values.get(p.id, p.value) for p in node.parents])
            values[node.id] = v
            out.append(v)
        return out


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextmanager
def grad_calls():
    """Count calls to :func:`backward`, keyed by their ``tag``."""
    st = _state()
    prev = st.counter
    counter: Counter = Counter()
    st.counter = counter
    try:
        yield counter
    finally:
        st.counter = prev
        if prev is not None:
            prev.update(counter)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def leaf(value, requires_grad: bool = False) -> Node:
    arr = _as_array(value)
    if arr.size == 0:
        raise AutodiffError("empty tensors are not allowed")
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("leaf value contains NaN or Inf")
    return Node(arr, "leaf", requires_grad=requires_grad)


def constant(value) -> Node:
    """Wrap a value as a non-differentiable node (no finiteness check)."""
    if isinstance(value, Node):
        return value
    return Node(_as_array(value), "const")


def _node(value, op, parents, vjp, forward=None) -> Node:
    rg = _state().grad_enabled and any(p.requires_grad for p in parents)
    return Node(np.asarray(value), op, parents, rg, vjp, forward)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    if g.shape == shape:
        return g
    ndim_extra = len(g.shape) - len(shape)
    axes = tuple(range(ndim_extra)) + tuple(
        i + ndim_extra for i, s in enumerate(shape) if s == 1 and g.shape[i + ndim_extra] != 1
    )
    out = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g, node):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value + b.value, "add", (a, b), vjp, np.add)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g, node):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(neg(g), b.shape) if b.requires_grad else None,
        )

    return _node(a.value - b.value, "sub", (a, b), vjp, np.subtract)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g, node):
        return (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _node(a.value * b.value, "mul", (a, b), vjp, np.multiply)


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)

    def vjp(g, node):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(div(mul(g, node), b)), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.value / b.value, "div", (a, b), vjp, np.divide)


def neg(a) -> Node:
    a = _lift(a)
    return _node(-a.value, "neg", (a,), lambda g, node: (neg(g),), np.negative)


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _node(a.value * c, "scale", (a,), lambda g, node: (scale(g, c),), lambda v: v * c)


def exp(a) -> Node:
    a = _lift(a)
    return _node(np.exp(a.value), "exp", (a,), lambda g, node: (mul(g, node),), np.exp)


def sqrt(a) -> Node:
    a = _lift(a)

    def vjp(g, node):
        return (div(scale(g, 0.5), node),)

    return _node(np.sqrt(a.value), "sqrt", (a,), vjp, np.sqrt)


def maximum(a, floor: float) -> Node:
    """Elementwise max against a scalar; gradient passes where ``a > floor``."""
    a = _lift(a)
    floor = float(floor)

    def vjp(g, node):
        return (mul(g, constant((a.value > floor).astype(np.float64))),)

    return _node(np.maximum(a.value, floor), "maximum", (a,), vjp, lambda v: np.maximum(v, floor))


def relu(a) -> Node:
    # derivative at 0 is 0; the mask is a constant, so the second derivative is 0
    a = _lift(a)

    def vjp(g, node):
        return (mul(g, constant((a.value > 0).astype(np.float64))),)

    return _node(np.maximum(a.value, 0.0), "relu", (a,), vjp, lambda v: np.maximum(v, 0.0))


def _sigmoid_np(v):
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(a) -> Node:
    a = _lift(a)

    def vjp(g, node):
        return (mul(g, mul(node, sub(1.0, node))),)

    return _node(_sigmoid_np(a.value), "sigmoid", (a,), vjp, _sigmoid_np)


def softplus(a) -> Node:
    a = _lift(a)

    def vjp(g, node):
        return (mul(g, sigmoid(a)),)

    return _node(np.logaddexp(0.0, a.value), "softplus", (a,), vjp, lambda v: np.logaddexp(0.0, v))


def activation(x, kind: str) -> Node:
    if kind == "relu":
        return relu(x)
    if kind == "softplus":
        return softplus(x)
    raise AutodiffError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- shape / reductions


def reshape(a, shape) -> Node:
    a = _lift(a)
    shape = tuple(shape)
    old = a.shape
    return _node(
        a.value.reshape(shape), "reshape", (a,), lambda g, node: (reshape(g, old),),
        lambda v: v.reshape(shape),
    )


def transpose(a, axes=None) -> Node:
    a = _lift(a)
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(
        np.ascontiguousarray(a.value.transpose(axes)), "transpose", (a,),
        lambda g, node: (transpose(g, inv),), lambda v: np.ascontiguousarray(v.transpose(axes)),
    )


def _broadcast_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _node(
        np.broadcast_to(a.value, shape).copy(), "broadcast", (a,),
        lambda g, node: (_unbroadcast(g, src),), lambda v: np.broadcast_to(v, shape).copy(),
    )


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _lift(a)
    src = a.shape

    def vjp(g, node):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            kshape = list(src)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, kshape)
        elif axis is None:
            g = reshape(g, (1,) * len(src))
        return (_broadcast_to(g, src),)

    fwd = lambda v: np.sum(v, axis=axis, keepdims=keepdims)  # noqa: E731
    return _node(np.asarray(fwd(a.value), dtype=np.float64), "sum", (a,), vjp, fwd)


def mean(a, axis=None) -> Node:
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise AutodiffError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch {a.shape} x {b.shape}")

    def vjp(g, node):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _node(a.value @ b.value, "matmul", (a, b), vjp, np.matmul)


def bias_add(x, b) -> Node:
    """Add a per-feature bias along axis 1 (dense [N,F] or conv [N,F,H,W])."""
    x, b = _lift(x), _lift(b)
    if b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise AutodiffError(f"bias of shape {b.shape} does not match features of {x.shape}")
    shape = (1, b.shape[0]) + (1,) * (x.value.ndim - 2)
    return add(x, reshape(b, shape))


def _im2col_np(x, kh, kw):
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: [N, C, oh, ow, kh, kw] -> [N, oh, ow, C, kh, kw]
    oh, ow = h - kh + 1, w - kw + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_np(cols, xshape, kh, kw):
    n, c, h, w = xshape
    oh, ow = h - kh + 1, w - kw + 1
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(xshape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh, j:j + ow] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def im2col(x, kh: int, kw: int) -> Node:
    x = _lift(x)
    xshape = x.shape

    def vjp(g, node):
        return (col2im(g, xshape, kh, kw),)

    return _node(_im2col_np(x.value, kh, kw), "im2col", (x,), vjp, lambda v: _im2col_np(v, kh, kw))


def col2im(cols, xshape, kh: int, kw: int) -> Node:
    cols = _lift(cols)
    xshape = tuple(xshape)

    def vjp(g, node):
        return (im2col(g, kh, kw),)

    return _node(
        _col2im_np(cols.value, xshape, kh, kw), "col2im", (cols,), vjp,
        lambda v: _col2im_np(v, xshape, kh, kw),
    )


def conv2d(x, kernel) -> Node:
    """Valid cross-correlation, stride 1: [N,C,H,W] * [F,C,kh,kw] -> [N,F,oh,ow]."""
    x, kernel = _lift(x), _lift(kernel)
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise AutodiffError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise AutodiffError(f"kernel has {kc} channels, input has {c}")
    if kh > h or kw > w:
        raise AutodiffError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = h - kh + 1, w - kw + 1
    cols = im2col(x, kh, kw)
    out = matmul(cols, transpose(reshape(kernel, (f, c * kh * kw))))
    return transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


# ---------------------------------------------------------------- losses / similarity


def log_softmax(logits) -> Node:
    z = _lift(logits)

    def fwd(v):
        m = v.max(axis=1, keepdims=True)
        return v - m - np.log(np.exp(v - m).sum(axis=1, keepdims=True))

    def vjp(g, node):
        return (sub(g, mul(exp(node), sum(g, axis=1, keepdims=True))),)

    return _node(fwd(z.value), "log_softmax", (z,), vjp, fwd)


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = _lift(logits)
    labels = np.asarray(labels)
    if z.value.ndim != 2:
        raise AutodiffError("cross_entropy expects [N, K] logits")
    n, k = z.shape
    if labels.shape != (n,):
        raise AutodiffError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise AutodiffError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return scale(sum(mul(log_softmax(z), constant(onehot))), -1.0 / n)


def cos_sim_rows(a, b) -> Node:
    """Row-wise cosine similarity of two [N, D] nodes -> [N].

    The denominator ||a||*||b|| is clamped below at ``COS_EPS``; a row where both
    norms fall below ``COS_EPS`` raises instead.
    """
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape or a.value.ndim != 2:
        raise AutodiffError(f"cos_sim_rows shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.value, axis=1)
    nb = np.linalg.norm(b.value, axis=1)
    if np.any((na < COS_EPS) & (nb < COS_EPS)):
        raise AutodiffError("cosine similarity undefined: both vectors have vanishing norm")
    dot = sum(mul(a, b), axis=1)
    sq = mul(sum(mul(a, a), axis=1), sum(mul(b, b), axis=1))
    return div(dot, sqrt(maximum(sq, COS_EPS**2)))


def cos_sim(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.size != b.size:
        raise AutodiffError(f"cos_sim length mismatch {a.size} vs {b.size}")
    out = cos_sim_rows(reshape(a, (1, a.size)), reshape(b, (1, b.size)))
    return reshape(out, ())


# ---------------------------------------------------------------- backward


def _ancestors(output: Node) -> list[Node]:
    seen = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(
    output: Node,
    wrt: Sequence[Node],
    create_graph: bool = False,
    allow_unused: bool = False,
    tag: str = "backward",
) -> list:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    Returns numpy arrays, or graph nodes when ``create_graph`` is true (those
    can be passed to another ``backward``). Unreachable ``wrt`` nodes raise
    unless ``allow_unused``, in which case their gradient is zero.
    """
    if output.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    st = _state()
    if st.counter is not None:
        st.counter[tag] += 1
    wrt = list(wrt)
    order = _ancestors(output)
    reachable = {n.id for n in order}
    for w in wrt:
        if w.id not in reachable and not allow_unused:
            raise AutodiffError(f"node {w!r} is not reachable from the output")

    prev = st.grad_enabled
    st.grad_enabled = create_graph
    try:
        grads: dict[int, Node] = {output.id: constant(np.ones_like(output.value))}
        for node in order:
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            pgrads = node.vjp(g, node)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                prev_g = grads.get(parent.id)
                grads[parent.id] = pg if prev_g is None else add(prev_g, pg)
        result = []
        for w in wrt:
            g = grads.get(w.id)
            if g is None:
                g = constant(np.zeros_like(w.value))
            result.append(g if create_graph else g.value)
        return result
    finally:
        st.grad_enabled = prev


def grad(fn: Callable[..., Node], argnums: Iterable[int] = (0,)):
    """Functional wrapper: ``grad(f)(x)`` returns df/dx as numpy arrays."""
    argnums = tuple(argnums)

    def wrapped(*args):
        nodes = [leaf(a, requires_grad=i in argnums) for i, a in enumerate(args)]
        out = fn(*nodes)
        gs = backward(out, [nodes[i] for i in argnums])
        return gs[0] if len(gs) == 1 else gs

    return wrapped
