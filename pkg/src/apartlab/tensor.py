"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is a tape. Leaves are created with :meth:`Graph.leaf`, every
other tensor comes out of :func:`forward_op` (or the operator overloads on
:class:`Tensor`). :func:`backward` walks the tape once, in reverse creation
order, and returns a map ``node_id -> gradient``.

Only the op kinds needed by small residual networks and the attacks are
provided. ``sign`` is recorded but has zero derivative everywhere.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "GraphError",
    "GradCheck",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "finite_diff_check",
    "forward_op",
    "OP_KINDS",
]

_graph_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """A non-finite value showed up; ``index`` locates it when known."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Tensor:
    __slots__ = ("data", "graph", "node_id", "requires_grad", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected method below

    def __init__(self, data, graph, node_id, requires_grad=False, name=None):
        self.data = data
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self.graph.grads is None:
            return None
        return self.graph.grads.get(self.node_id)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(#{self.node_id}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return forward_op("add", [self, other])

    def __radd__(self, other):
        return forward_op("add", [other, self])

    def __sub__(self, other):
        return forward_op("sub", [self, other])

    def __rsub__(self, other):
        return forward_op("sub", [other, self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scalar_mul", [self], c=float(other))
        return forward_op("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return forward_op("scalar_mul", [self], c=-1.0)

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])

    def __rmatmul__(self, other):
        return forward_op("matmul", [other, self])


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: int
    params: dict
    saved: dict = field(default_factory=dict)
    requires_grad: bool = True


class Graph:
    """One computation tape. Not thread-safe; use one graph per thread."""

    def __init__(self):
        self.id = next(_graph_ids)
        self.generation = 0
        self.tensors: list[Tensor] = []
        self.nodes: list[Node] = []
        self.grads = None
        self.backward_calls = 0

    def _register(self, data, requires_grad, name=None):
        t = Tensor(data, self, len(self.tensors), requires_grad, name)
        self.tensors.append(t)
        return t

    def leaf(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        return self._register(arr, requires_grad, name)

    def constant(self, data, name=None):
        return self.leaf(data, requires_grad=False, name=name)

    def op_counts(self):
        return Counter(n.kind for n in self.nodes)

    def reset(self):
        """Drop the tape. Tensors and taps from before the reset become stale."""
        self.generation += 1
        self.tensors = []
        self.nodes = []
        self.grads = None
        self.backward_calls = 0


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable | None
    arity: int


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def _add_fwd(a, b):
    _broadcast_shape("add", a, b)
    return a + b, {}


def _add_bwd(g, ins, out, saved):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, {}


def _sub_bwd(g, ins, out, saved):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, {}


def _mul_bwd(g, ins, out, saved):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scalar_mul_fwd(a, c):
    return a * c, {}


def _scalar_mul_bwd(g, ins, out, saved, c):
    return (g * c,)


def _relu_fwd(a):
    return np.maximum(a, 0.0), {}


def _relu_bwd(g, ins, out, saved):
    return (g * (ins[0] > 0),)


def _sign_fwd(a):
    return np.sign(a), {}


def _clamp_fwd(a, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    for bound in (lo, hi):
        try:
            if np.broadcast_shapes(a.shape, bound.shape) != a.shape:
                raise ValueError
        except ValueError:
            raise ShapeError(f"clamp: bound shape {bound.shape} does not fit input {a.shape}") from None
    return np.minimum(np.maximum(a, lo), hi), {"lo": lo, "hi": hi}


def _clamp_bwd(g, ins, out, saved, lo, hi):
    a = ins[0]
    return (g * ((a >= saved["lo"]) & (a <= saved["hi"])),)


# -- reductions ---------------------------------------------------------------

def _mean_fwd(a, axis=None):
    return np.mean(a, axis=axis), {}


def _mean_bwd(g, ins, out, saved, axis=None):
    a = ins[0]
    if axis is None:
        return (np.full(a.shape, g / a.size),)
    return (np.broadcast_to(np.expand_dims(g, axis) / a.shape[axis], a.shape).copy(),)


def _sum_fwd(a, axis=None):
    return np.sum(a, axis=axis), {}


def _sum_bwd(g, ins, out, saved, axis=None):
    a = ins[0]
    if axis is None:
        return (np.full(a.shape, g),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _sum_sq_fwd(a):
    return np.sum(a * a), {}


def _sum_sq_bwd(g, ins, out, saved):
    return (2.0 * ins[0] * g,)


def _avgpool_fwd(a):
    if a.ndim != 4:
        raise ShapeError(f"avgpool: expected (B, C, H, W), got {a.shape}")
    return a.mean(axis=(2, 3)), {}


def _avgpool_bwd(g, ins, out, saved):
    a = ins[0]
    h, w = a.shape[2:]
    return (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), {}
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None


def _reshape_bwd(g, ins, out, saved, shape):
    return (g.reshape(ins[0].shape),)


# -- linear algebra -------------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b, {}


def _matmul_bwd(g, ins, out, saved):
    a, b = ins
    return g @ b.T, a.T @ g


def _conv2d_fwd(x, w, padding=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (B, C, H, W) and (O, C, k, k), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape[2:]}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    return out, {"win": win}


def _conv2d_bwd(g, ins, out, saved, padding=0):
    x, w = ins
    k = w.shape[2]
    gw = np.einsum("bchwij,bohw->ocij", saved["win"], g, optimize=True)
    gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gwin = sliding_window_view(gp, (k, k), axis=(2, 3))
    gxp = np.einsum("bohwij,ocij->bchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp), gw


# -- loss ---------------------------------------------------------------------

def _xent_fwd(logits, labels):
    labels = np.asarray(labels)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    lab = labels.reshape(-1).astype(np.int64)
    if z.ndim != 2 or lab.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(lab)), lab]
    return (losses[0] if single else losses), {"shifted": shifted, "lse": lse, "lab": lab}


def _xent_bwd(g, ins, out, saved, labels):
    p = np.exp(saved["shifted"] - saved["lse"][:, None])
    p[np.arange(len(saved["lab"])), saved["lab"]] -= 1.0
    g = np.asarray(g).reshape(-1, 1)
    grad = p * g
    return (grad[0] if ins[0].ndim == 1 else grad,)


OP_KINDS: dict[str, OpDef] = {
    "add": OpDef(_add_fwd, _add_bwd, 2),
    "sub": OpDef(_sub_fwd, _sub_bwd, 2),
    "mul": OpDef(_mul_fwd, _mul_bwd, 2),
    "scalar_mul": OpDef(_scalar_mul_fwd, _scalar_mul_bwd, 1),
    "matmul": OpDef(_matmul_fwd, _matmul_bwd, 2),
    "conv2d": OpDef(_conv2d_fwd, _conv2d_bwd, 2),
    "relu": OpDef(_relu_fwd, _relu_bwd, 1),
    "mean": OpDef(_mean_fwd, _mean_bwd, 1),
    "sum": OpDef(_sum_fwd, _sum_bwd, 1),
    "sum_sq": OpDef(_sum_sq_fwd, _sum_sq_bwd, 1),
    "avgpool": OpDef(_avgpool_fwd, _avgpool_bwd, 1),
    "reshape": OpDef(_reshape_fwd, _reshape_bwd, 1),
    "softmax_cross_entropy": OpDef(_xent_fwd, _xent_bwd, 1),
    "sign": OpDef(_sign_fwd, None, 1),
    "clamp": OpDef(_clamp_fwd, _clamp_bwd, 1),
}


def forward_op(kind, inputs, **params):
    """Evaluate op ``kind`` on ``inputs`` and record it on their graph.

    Raw arrays and python numbers among the inputs become constants of the
    graph the tensor inputs live on.
    """
    op = OP_KINDS.get(kind)
    if op is None:
        raise KeyError(f"unknown op kind {kind!r}")
    if len(inputs) != op.arity:
        raise ShapeError(f"{kind}: expected {op.arity} inputs, got {len(inputs)}")
    graphs = {t.graph.id: t.graph for t in inputs if isinstance(t, Tensor)}
    if len(graphs) != 1:
        raise GraphError(f"{kind}: inputs must share exactly one graph, found {len(graphs)}")
    graph = next(iter(graphs.values()))
    tensors = [t if isinstance(t, Tensor) else graph.constant(t) for t in inputs]
    for t in tensors:
        if t.node_id >= len(graph.tensors) or graph.tensors[t.node_id] is not t:
            raise GraphError(f"{kind}: input tensor #{t.node_id} is stale (graph was reset)")
    data, saved = op.forward(*(t.data for t in tensors), **params)
    data = np.asarray(data, dtype=np.float64)
    requires_grad = op.backward is not None and any(t.requires_grad for t in tensors)
    out = graph._register(data, requires_grad)
    graph.nodes.append(
        Node(kind, tuple(t.node_id for t in tensors), out.node_id, params, saved, requires_grad)
    )
    return out


def backward(loss):
    """Accumulate d(loss)/d(node) for every node that depends on a tracked leaf.

    Returns the gradient map and also stores it on the graph so that
    ``tensor.grad`` works. A graph supports one backward per reset.
    """
    graph = loss.graph
    if loss.node_id >= len(graph.tensors) or graph.tensors[loss.node_id] is not loss:
        raise GraphError("loss tensor is stale (graph was reset)")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.backward_calls:
        raise GraphError("backward already ran on this graph; reset it first")
    graph.backward_calls += 1
    grads = {loss.node_id: np.ones_like(loss.data)}
    tensors = graph.tensors
    for node in reversed(graph.nodes):
        g = grads.get(node.output)
        if g is None or not node.requires_grad:
            continue
        ins = [tensors[i].data for i in node.inputs]
        in_grads = OP_KINDS[node.kind].backward(g, ins, tensors[node.output].data, node.saved, **node.params)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not tensors[i].requires_grad:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    graph.grads = grads
    return grads


@dataclass
class GradCheck:
    """Outcome of :func:`finite_diff_check`.

    ``unstable`` lists coordinates where the left and right one-sided
    differences disagree, i.e. the function has a kink there.
    """

    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    unstable: list

    def __float__(self):
        return self.max_rel_error


def finite_diff_check(f, point, h=1e-5, kink_tol=1e-3):
    """Compare autodiff gradient of scalar ``f`` at ``point`` with central differences.

    ``f`` receives a tracked leaf tensor and must return a scalar tensor on the
    same graph. The error is ``max |analytic - numeric| / max(1, |analytic|)``.
    """
    point = np.array(point, dtype=np.float64)

    def value(p):
        g = Graph()
        out = f(g.leaf(p, requires_grad=True))
        return float(out.data)

    g = Graph()
    x = g.leaf(point, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NonFiniteError(f"analytic gradient is not finite at {bad}", bad)

    f0 = float(out.data)
    numeric = np.zeros_like(point)
    unstable = []
    for idx in np.ndindex(point.shape):
        p = point.copy()
        p[idx] += h
        fp = value(p)
        p[idx] = point[idx] - h
        fm = value(p)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite at coordinate {idx} +/- {h}", idx)
        numeric[idx] = (fp - fm) / (2 * h)
        right, left = (fp - f0) / h, (f0 - fm) / h
        if abs(right - left) > kink_tol * max(1.0, abs(numeric[idx])):
            unstable.append(idx)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheck(float(err.max()) if err.size else 0.0, tuple(int(i) for i in worst), analytic, numeric, unstable)
