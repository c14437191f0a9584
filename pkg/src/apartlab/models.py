"""Small pre-activation residual networks with per-block input taps.

Block ``i`` computes ``x_i + F(x_i + d_i)`` where ``F`` is
affine -> relu -> linear/conv -> affine -> relu -> linear/conv and ``d_i`` is
an optional perturbation injected on the transform branch only. The
"affine" layers are learnable per-channel scale/shift standing in for
BatchNorm (no running statistics).

A forward pass records every block input on the tape, so a single backward
yields ``dL/dx_i`` for all blocks together with ``dL/dtheta``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Graph, GraphError, ShapeError, Tensor, backward, forward_op

ARCHS = ("micro-preact", "micro-conv")


@dataclass(frozen=True)
class ArchConfig:
    """Network shape. ``in_shape`` is ``(d,)`` for dense nets, ``(C, H, W)`` for conv nets."""

    arch: str = "micro-preact"
    in_shape: tuple = (2,)
    classes: int = 2
    width: int = 32
    blocks: int = 3
    stem: bool = True
    kernel: int = 3
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(n) for n in self.in_shape))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.arch == "micro-preact" and len(self.in_shape) != 1:
            raise ValueError(f"micro-preact takes flat inputs, got in_shape={self.in_shape}")
        if self.arch == "micro-conv" and len(self.in_shape) != 3:
            raise ValueError(f"micro-conv takes (C, H, W) inputs, got in_shape={self.in_shape}")
        if not self.stem and self.in_shape[0] != self.width:
            raise ValueError(
                f"without a stem the input width {self.in_shape[0]} must equal the block width {self.width}"
            )
        if self.blocks < 1 or self.width < 1 or self.classes < 2:
            raise ValueError("need blocks >= 1, width >= 1, classes >= 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd (same-size zero padding)")

    def to_dict(self):
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d


def param_count(arch: ArchConfig) -> int:
    """Closed-form number of parameters for ``arch``."""
    w, k, K = arch.width, arch.kernel, arch.classes
    if arch.arch == "micro-preact":
        block = 2 * (2 * w) + 2 * (w * w + w)
        stem = arch.in_shape[0] * w + w if arch.stem else 0
    else:
        block = 2 * (2 * w) + 2 * (w * w * k * k + w)
        stem = arch.in_shape[0] * w * k * k + w if arch.stem else 0
    head = 2 * w + w * K + K
    return stem + arch.blocks * block + head


@dataclass
class PerturbationSet:
    """Perturbations for one batch.

    ``input_delta`` is added to the model input (with no stem, that is also
    the first block input). ``block_deltas`` maps a block index to a delta
    added to that block's transform-branch input. Entries may be arrays or
    tensors living on the graph of the forward pass that consumes them.
    """

    input_delta: object = None
    block_deltas: dict = field(default_factory=dict)
    provenance: str = ""


@dataclass
class BlockTaps:
    """Tensors recorded by :func:`forward_tapped`.

    ``inputs[0]`` is the (perturbed) network input, ``inputs[i]`` the input of
    block ``i`` (1-based, matching ``x_i``). ``grads`` is filled by
    :func:`block_input_grads`.
    """

    inputs: list
    graph: Graph
    generation: int
    params: dict
    grads: list = None
    param_grads: dict = None

    @property
    def shapes(self):
        return [t.shape for t in self.inputs]


class ResidualNet:
    def __init__(self, arch: ArchConfig, skip=True):
        self.arch = arch
        self.skip = skip
        self.passes = Counter()
        self.params = self._init_params(np.random.default_rng(arch.init_seed))

    # parameters ---------------------------------------------------------

    def _init_params(self, rng):
        a = self.arch
        w, k = a.width, a.kernel
        conv = a.arch == "micro-conv"
        p = {}

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        def affine(name):
            shape = (1, w, 1, 1) if conv else (w,)
            p[f"{name}.scale"] = np.ones(shape)
            p[f"{name}.shift"] = np.zeros(shape)

        def linear(name, n_in, n_out):
            if conv:
                p[f"{name}.weight"] = he((n_out, n_in, k, k), n_in * k * k)
                p[f"{name}.bias"] = np.zeros((1, n_out, 1, 1))
            else:
                p[f"{name}.weight"] = he((n_in, n_out), n_in)
                p[f"{name}.bias"] = np.zeros(n_out)

        if a.stem:
            linear("stem", a.in_shape[0], w)
        for i in range(1, a.blocks + 1):
            affine(f"block{i}.pre1")
            linear(f"block{i}.lin1", w, w)
            affine(f"block{i}.pre2")
            linear(f"block{i}.lin2", w, w)
        affine("head.pre")
        p["head.weight"] = he((w, a.classes), w)
        p["head.bias"] = np.zeros(a.classes)
        return p

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def flat_params(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.size}")
        off = 0
        for name, v in self.params.items():
            self.params[name] = theta[off:off + v.size].reshape(v.shape).copy()
            off += v.size

    def copy(self):
        other = ResidualNet(self.arch, self.skip)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    @property
    def delta_blocks(self):
        """1-based indices of blocks that take a transform-branch delta.

        Without a stem the first block input *is* the model input, whose
        perturbation is the input delta, so block 1 gets no separate one.
        """
        first = 1 if self.arch.stem else 2
        return list(range(first, self.arch.blocks + 1))

    # forward ------------------------------------------------------------

    def _layer(self, h, P, name):
        if self.arch.arch == "micro-conv":
            h = forward_op("conv2d", [h, P[f"{name}.weight"]], padding=self.arch.kernel // 2)
        else:
            h = h @ P[f"{name}.weight"]
        return h + P[f"{name}.bias"]

    def _affine_relu(self, h, P, name):
        return forward_op("relu", [h * P[f"{name}.scale"] + P[f"{name}.shift"]])

    def forward_tapped(self, x, deltas=None, graph=None, track_params=True):
        graph = graph if graph is not None else Graph()
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.arch.in_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match model input {self.arch.in_shape}")
        deltas = deltas or PerturbationSet()
        P = {k: graph.leaf(v, requires_grad=track_params, name=k) for k, v in self.params.items()}
        self.passes["forward"] += 1

        h = graph.leaf(x, requires_grad=True, name="x")
        if deltas.input_delta is not None:
            h = _inject(h, deltas.input_delta, "input")
        inputs = [h]
        if self.arch.stem:
            h = self._layer(h, P, "stem")
        allowed = set(self.delta_blocks)
        unknown = set(deltas.block_deltas) - allowed
        if unknown:
            raise ShapeError(f"block deltas given for blocks {sorted(unknown)}; this net accepts {sorted(allowed)}")
        for i in range(1, self.arch.blocks + 1):
            inputs.append(h)
            branch = h
            d = deltas.block_deltas.get(i)
            if d is not None:
                branch = _inject(h, d, f"block {i}")
            branch = self._affine_relu(branch, P, f"block{i}.pre1")
            branch = self._layer(branch, P, f"block{i}.lin1")
            branch = self._affine_relu(branch, P, f"block{i}.pre2")
            branch = self._layer(branch, P, f"block{i}.lin2")
            h = h + branch if self.skip else branch
        h = self._affine_relu(h, P, "head.pre")
        if self.arch.arch == "micro-conv":
            h = forward_op("avgpool", [h])
        logits = h @ P["head.weight"] + P["head.bias"]
        return logits, BlockTaps(inputs, graph, graph.generation, P)

    def loss(self, out, y):
        """Per-example softmax cross-entropy."""
        return forward_op("softmax_cross_entropy", [out], labels=np.asarray(y))

    def predict(self, x):
        g = Graph()
        logits, _ = self.forward_tapped(x, graph=g, track_params=False)
        return np.argmax(logits.data, axis=1)


class FunctionModel:
    """Wraps an arbitrary per-example loss ``fn(params, x)`` as a model.

    ``params`` maps names to tensors built from ``self.params``; labels are
    ignored. Used for closed-form fixtures (linear and quadratic losses) and
    toy objectives. There are no residual blocks, so only the input delta
    applies.
    """

    def __init__(self, fn, params=None):
        self.fn = fn
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in (params or {}).items()}
        self.passes = Counter()
        self.delta_blocks = []

    def forward_tapped(self, x, deltas=None, graph=None, track_params=True):
        graph = graph if graph is not None else Graph()
        x = np.asarray(x, dtype=np.float64)
        deltas = deltas or PerturbationSet()
        if deltas.block_deltas:
            raise ShapeError("FunctionModel has no residual blocks to perturb")
        P = {k: graph.leaf(v, requires_grad=track_params, name=k) for k, v in self.params.items()}
        self.passes["forward"] += 1
        h = graph.leaf(x, requires_grad=True, name="x")
        if deltas.input_delta is not None:
            h = _inject(h, deltas.input_delta, "input")
        return self.fn(P, h), BlockTaps([h], graph, graph.generation, P)

    def loss(self, out, y):
        return out

    def copy(self):
        return FunctionModel(self.fn, {k: v.copy() for k, v in self.params.items()})


def _inject(h, delta, where):
    if isinstance(delta, Tensor):
        if delta.graph is not h.graph:
            raise GraphError(f"{where} delta lives on another graph")
        shape = delta.shape
    else:
        delta = np.asarray(delta, dtype=np.float64)
        shape = delta.shape
    if shape != h.shape:
        raise ShapeError(f"{where} delta has shape {shape}, expected {h.shape}")
    return h + delta


def forward_tapped(net, x, deltas=None, graph=None, track_params=True):
    return net.forward_tapped(x, deltas, graph=graph, track_params=track_params)


def block_input_grads(net, loss, taps):
    """Run the single backward pass; return ``[dL/dx_0, dL/dx_1, ...]``.

    Parameter gradients land in ``taps.param_grads`` (empty when the forward
    did not track parameters).
    """
    if taps.graph.generation != taps.generation:
        raise GraphError("taps are stale: their graph was reset after the forward pass")
    grads = backward(loss)
    net.passes["backward"] += 1
    taps.grads = [grads.get(t.node_id, np.zeros_like(t.data)) for t in taps.inputs]
    taps.param_grads = {k: grads.get(t.node_id, np.zeros_like(t.data)) for k, t in taps.params.items() if t.requires_grad}
    return taps.grads
