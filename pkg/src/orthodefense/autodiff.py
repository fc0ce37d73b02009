"""Taped reverse-mode automatic differentiation on numpy arrays.

Every operation appends a node to a :class:`Graph`.  A node's vector-Jacobian
product is written in terms of the same public operations, so running
:func:`backward` with ``create_graph=True`` records the backward pass on the
graph as well and the resulting gradients can be differentiated again.

Values are float64 numpy arrays and are treated as immutable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Variable",
    "AutodiffError",
    "ShapeError",
    "as_variable",
    "constant",
    "no_record",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "dot",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "relu",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "log_softmax",
    "softmax_cross_entropy",
    "l2_norm",
    "im2col",
    "col2im",
    "conv2d",
    "backward",
    "grad",
    "grad_check",
]


class AutodiffError(Exception):
    """Misuse of the differentiation engine (wrong graph, non-scalar output)."""


class ShapeError(AutodiffError, ValueError):
    """Operand shapes do not conform to an operation's algebra."""


_RECORDING = True


@contextlib.contextmanager
def no_record():
    """Evaluate operations as plain values without touching any graph."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class _Node:
    __slots__ = ("op", "parents", "vjp", "value")

    def __init__(self, op, parents, vjp, value):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.value = value


class Graph:
    """Append-only record of operations.

    Parent indices of a node always refer to earlier nodes, so the node list is
    a topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.roots: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, vjp, value) -> int:
        self.nodes.append(_Node(op, parents, vjp, value))
        return len(self.nodes) - 1

    def leaf(self, value) -> "Variable":
        """Register a differentiable input."""
        value = _freeze(value)
        idx = self._append("leaf", (), None, value)
        self.roots.append(idx)
        return Variable(value, self, idx)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node value from the (optionally replaced) leaves."""
        leaf_values = leaf_values or {}
        out: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                out.append(_freeze(leaf_values.get(i, node.value)))
            elif node.op == "const":
                out.append(node.value)
            else:
                fn = _REPLAY[node.op[0]]
                out.append(fn(node, [out[p] for p in node.parents]))
        return out


def _freeze(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Variable:
    """A value, optionally tied to a node of a graph.

    A Variable with ``graph is None`` is a constant: operations on it are not
    recorded and gradients never flow into it.
    """

    __slots__ = ("value", "graph", "index")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, graph: Graph | None = None, index: int = -1):
        self.value = value
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Variable":
        return Variable(self.value)

    def __repr__(self):
        where = "const" if self.graph is None else f"node {self.index}"
        return f"Variable({where}, shape={self.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def constant(value) -> Variable:
    return Variable(_freeze(value))


def as_variable(x) -> Variable:
    if isinstance(x, Variable):
        return x
    return constant(x)


def _record(op, value, parents: Sequence[Variable], vjp) -> Variable:
    value = np.asarray(value, dtype=np.float64)
    value.setflags(write=False)
    if not _RECORDING:
        return Variable(value)
    graph = None
    for p in parents:
        if p.graph is not None:
            if graph is None:
                graph = p.graph
            elif p.graph is not graph:
                raise AutodiffError(f"{op[0]}: operands live on different graphs")
    if graph is None:
        return Variable(value)
    indices = []
    for p in parents:
        if p.graph is graph:
            indices.append(p.index)
        else:
            # constants are stored on the graph so it can be replayed
            indices.append(graph._append("const", (), None, p.value))
    idx = graph._append(op, tuple(indices), vjp, value)
    return Variable(value, graph, idx)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, a: Variable, b: Variable) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: Variable, shape) -> Variable:
    if g.shape == tuple(shape):
        return g
    return sum_to(g, shape)


def _sum_to_value(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(("add",), a.value + b.value, (a, b), vjp)


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _record(("sub",), a.value - b.value, (a, b), vjp)


def neg(a) -> Variable:
    a = as_variable(a)
    return _record(("neg",), -a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record(("mul",), a.value * b.value, (a, b), vjp)


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_shape("div", a, b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(("div",), a.value / b.value, (a, b), vjp)


def matmul(a, b) -> Variable:
    """Matrix product of two 2-D operands."""
    a, b = as_variable(a), as_variable(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record(("matmul",), a.value @ b.value, (a, b), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Variable:  # noqa: A001 - mirrors numpy
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    value = a.value.sum(axis=axes, keepdims=keepdims)
    return _record(("sum", axes, keepdims), value, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Variable:
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(sum(a, axis=axes, keepdims=keepdims), float(count))


def reshape(a, shape) -> Variable:
    a = as_variable(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(("reshape", value.shape), value, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Variable:
    a = as_variable(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        ("transpose", axes), a.value.transpose(axes), (a,), lambda g: (transpose(g, inverse),)
    )


def broadcast_to(a, shape) -> Variable:
    a = as_variable(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record(("broadcast_to", shape), value, (a,), lambda g: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Variable:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_variable(a)
    shape = tuple(shape)
    return _record(
        ("sum_to", shape), _sum_to_value(a.value, shape), (a,), lambda g: (broadcast_to(g, a.shape),)
    )


def relu(a) -> Variable:
    a = as_variable(a)
    mask = (a.value > 0).astype(np.float64)
    return _record(("relu",), a.value * mask, (a,), lambda g: (mul(g, mask),))


def maximum(a, floor: float) -> Variable:
    """Elementwise ``max(a, floor)`` for a constant scalar floor."""
    a = as_variable(a)
    mask = (a.value > floor).astype(np.float64)
    value = np.maximum(a.value, floor)
    return _record(("maximum", floor), value, (a,), lambda g: (mul(g, mask),))


def exp(a) -> Variable:
    a = as_variable(a)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _record(("exp",), np.exp(a.value), (a,), vjp)
    out_holder.append(out)
    return out


def log(a) -> Variable:
    a = as_variable(a)
    return _record(("log",), np.log(a.value), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Variable:
    a = as_variable(a)
    out_holder = []

    def vjp(g):
        return (div(mul(g, 0.5), out_holder[0]),)

    out = _record(("sqrt",), np.sqrt(a.value), (a,), vjp)
    out_holder.append(out)
    return out


def log_softmax(a, axis=-1) -> Variable:
    a = as_variable(a)
    axis = axis % a.ndim
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_holder = []

    def vjp(g):
        probs = exp(out_holder[0])
        return (sub(g, mul(probs, sum(g, axis=axis, keepdims=True))),)

    out = _record(("log_softmax", axis), value, (a,), vjp)
    out_holder.append(out)
    return out


def l2_norm(a, axis=-1, keepdims=False) -> Variable:
    """Euclidean norm along ``axis``; its derivative at the origin is taken as zero."""
    a = as_variable(a)
    axes = _norm_axis(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    value = np.sqrt((a.value * a.value).sum(axis=axes, keepdims=keepdims))
    out_holder = []

    def vjp(g):
        norm = reshape(out_holder[0], kept)
        ratio = div(a, maximum(norm, 1e-300))
        return (mul(reshape(g, kept), ratio),)

    out = _record(("l2_norm", axes, keepdims), value, (a,), vjp)
    out_holder.append(out)
    return out


def _conv_geometry(shape, kernel, stride, padding):
    n, c, h, w = shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kernel} too large for input {shape} with padding {padding}")
    return n, c, h, w, oh, ow


def _im2col_value(x, kernel, stride, padding):
    n, c, h, w, oh, ow = _conv_geometry(x.shape, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, oh, ow))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kernel * kernel, oh * ow)


def _col2im_value(cols, image_shape, kernel, stride, padding):
    n, c, h, w, oh, ow = _conv_geometry(image_shape, kernel, stride, padding)
    cols = cols.reshape(n, c, kernel, kernel, oh, ow)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, padding : padding + h, padding : padding + w]


def im2col(x, kernel: int, stride: int = 1, padding: int = 0) -> Variable:
    """Unfold (N, C, H, W) patches into (N, C*k*k, OH*OW) columns."""
    x = as_variable(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected a 4-D input, got shape {x.shape}")
    shape = x.shape
    value = _im2col_value(x.value, kernel, stride, padding)
    return _record(
        ("im2col", kernel, stride, padding),
        value,
        (x,),
        lambda g: (col2im(g, shape, kernel, stride, padding),),
    )


def col2im(cols, image_shape, kernel: int, stride: int = 1, padding: int = 0) -> Variable:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    cols = as_variable(cols)
    image_shape = tuple(image_shape)
    value = _col2im_value(cols.value, image_shape, kernel, stride, padding)
    return _record(
        ("col2im", image_shape, kernel, stride, padding),
        value,
        (cols,),
        lambda g: (im2col(g, kernel, stride, padding),),
    )


_REPLAY: dict[str, Callable] = {
    "add": lambda n, v: v[0] + v[1],
    "sub": lambda n, v: v[0] - v[1],
    "neg": lambda n, v: -v[0],
    "mul": lambda n, v: v[0] * v[1],
    "div": lambda n, v: v[0] / v[1],
    "matmul": lambda n, v: v[0] @ v[1],
    "sum": lambda n, v: v[0].sum(axis=n.op[1], keepdims=n.op[2]),
    "reshape": lambda n, v: v[0].reshape(n.op[1]),
    "transpose": lambda n, v: v[0].transpose(n.op[1]),
    "broadcast_to": lambda n, v: np.broadcast_to(v[0], n.op[1]),
    "sum_to": lambda n, v: _sum_to_value(v[0], n.op[1]),
    "relu": lambda n, v: np.maximum(v[0], 0.0),
    "maximum": lambda n, v: np.maximum(v[0], n.op[1]),
    "exp": lambda n, v: np.exp(v[0]),
    "log": lambda n, v: np.log(v[0]),
    "sqrt": lambda n, v: np.sqrt(v[0]),
    "log_softmax": lambda n, v: (lambda s: s - np.log(np.exp(s).sum(axis=n.op[1], keepdims=True)))(
        v[0] - v[0].max(axis=n.op[1], keepdims=True)
    ),
    "l2_norm": lambda n, v: np.sqrt((v[0] * v[0]).sum(axis=n.op[1], keepdims=n.op[2])),
    "im2col": lambda n, v: _im2col_value(v[0], *n.op[1:]),
    "col2im": lambda n, v: _col2im_value(v[0], *n.op[1:]),
}


# ---------------------------------------------------------------------------
# composite operations


def dot(a, b) -> Variable:
    """Inner product of two vectors (or row-wise for 2-D operands along the last axis)."""
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return sum(mul(a, b), axis=-1)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Variable:
    """Cross-entropy of integer ``labels`` under softmax(``logits``).

    ``logits`` is (batch, K) or a single (K,) vector.  ``reduction`` is one of
    ``"mean"``, ``"sum"`` or ``"none"``.
    """
    logits = as_variable(logits)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} and labels {labels.shape} disagree"
        )
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    per_example = neg(sum(mul(log_softmax(logits, axis=1), onehot), axis=1))
    if reduction == "none":
        return per_example
    if reduction == "sum":
        return sum(per_example)
    if reduction == "mean":
        return mean(per_example)
    raise ValueError(f"unknown reduction {reduction!r}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Variable:
    """2-D cross-correlation of (N, C, H, W) input with (O, C, k, k) weights."""
    x, weight = as_variable(x), as_variable(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} do not conform")
    out_ch, in_ch, kernel, _ = weight.shape
    n, _, _, _, oh, ow = _conv_geometry(x.shape, kernel, stride, padding)
    cols = im2col(x, kernel, stride, padding)  # (N, CKK, L)
    rows = reshape(transpose(cols, (0, 2, 1)), (n * oh * ow, in_ch * kernel * kernel))
    out = matmul(rows, transpose(reshape(weight, (out_ch, in_ch * kernel * kernel))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, oh, ow, out_ch)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# differentiation


def backward(y: Variable, wrt: Sequence[Variable], create_graph: bool = False):
    """Gradients of scalar ``y`` with respect to each Variable in ``wrt``.

    With ``create_graph`` the gradients are Variables recorded on ``y``'s graph
    and can be differentiated again; otherwise plain arrays are returned.
    Variables that ``y`` does not depend on get a zero gradient.
    """
    if y.size != 1:
        raise AutodiffError(f"backward: output must be scalar, got shape {y.shape}")
    graph = y.graph
    for w in wrt:
        if graph is None or w.graph is not graph or not (0 <= w.index < len(graph)):
            raise AutodiffError("backward: a requested variable is not on the output's graph")
    if graph is None:
        return [np.zeros(w.shape) for w in wrt]

    top = y.index
    # nodes that can reach a requested variable; everything else is skipped
    targets = {w.index for w in wrt}
    lo = min(targets)
    useful = [False] * (top + 1)
    for i in range(lo, top + 1):
        if i in targets:
            useful[i] = True
        else:
            useful[i] = any(p >= 0 and useful[p] for p in graph.nodes[i].parents)

    grads: dict[int, Variable] = {}
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        grads[top] = constant(np.ones(y.shape))
        for i in range(top, lo - 1, -1):
            g = grads.get(i)
            node = graph.nodes[i]
            if g is None or node.vjp is None or not useful[i]:
                continue
            if i not in targets:
                del grads[i]
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if p < 0 or pg is None or not useful[p]:
                    continue
                grads[p] = pg if p not in grads else add(grads[p], pg)

    out = []
    for w in wrt:
        g = grads.get(w.index)
        if g is None:
            g = constant(np.zeros(w.shape))
        out.append(g if create_graph else np.array(g.value))
    return out


def grad(f: Callable[[Variable], Variable], x) -> np.ndarray:
    """Gradient of scalar-valued ``f`` at ``x`` on a fresh graph."""
    g = Graph()
    xv = g.leaf(x)
    return backward(f(xv), [xv])[0]


def grad_check(f: Callable[[Variable], Variable], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = np.array(x, dtype=np.float64)
    analytic = grad(f, x).reshape(-1)
    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    with no_record():
        for k in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += h
            xm[k] -= h
            fp = f(constant(xp.reshape(x.shape))).item()
            fm = f(constant(xm.reshape(x.shape))).item()
            numeric[k] = (fp - fm) / (2 * h)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
