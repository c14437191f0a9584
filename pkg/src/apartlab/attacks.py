"""Fixed (non-learned) perturbation generators under an L-infinity budget."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import PerturbationSet, block_input_grads
from .tensor import Graph, NonFiniteError, forward_op

ATTACK_KINDS = ("fgsm", "pgd", "f-plus-fgsm", "random-sign", "gaussian", "none")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None  # pgd default: epsilon / 4
    init: str = "uniform"
    seed: int = 0
    clip: bool = False  # keep x + delta inside [0, 1]

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.init not in ("zero", "uniform"):
            raise ValueError(f"init must be 'zero' or 'uniform', got {self.init!r}")

    @property
    def name(self):
        if self.kind == "pgd":
            return f"pgd-{self.steps}"
        return self.kind

    @property
    def pgd_step(self):
        return self.step_size if self.step_size is not None else self.epsilon / 4


def project_linf(delta, epsilon):
    """Clamp every coordinate into [-epsilon, epsilon]."""
    return np.clip(delta, -epsilon, epsilon)


def feasible_bounds(x, epsilon, clip=False):
    """Per-coordinate box for delta: the eps-ball, intersected with [0,1] - x when clipping."""
    lo = np.full(np.shape(x), -float(epsilon))
    hi = np.full(np.shape(x), float(epsilon))
    if clip:
        lo = np.maximum(lo, -x)
        hi = np.minimum(hi, 1.0 - x)
    return lo, hi


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def input_grad(net, x, y, delta=None):
    """One forward/backward at ``x + delta``; returns ``(per-example loss, dL/dx)``.

    The loss differentiated is the batch mean, as in training.
    """
    g = Graph()
    out, taps = net.forward_tapped(x, PerturbationSet(delta), graph=g, track_params=False)
    losses = net.loss(out, y)
    loss = forward_op("mean", [losses])
    grads = block_input_grads(net, loss, taps)
    grad = grads[0]
    _check_finite(grad)
    return np.asarray(losses.data), grad


def _check_finite(grad):
    bad = ~np.isfinite(grad.reshape(len(grad), -1)).all(axis=1) if grad.ndim else ~np.isfinite([grad])
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite input gradient for batch element {i}", i)


def check_bounded(pset, epsilon, tol=0.0):
    d = pset.input_delta
    if d is not None and np.size(d) and np.max(np.abs(d)) > epsilon + tol:
        raise AssertionError(f"{pset.provenance}: |delta|_inf = {np.max(np.abs(d))} exceeds epsilon {epsilon}")
    return pset


def fgsm(net, x, y, epsilon, clip=False):
    """delta = epsilon * sign(dL/dx), kept inside the feasible box."""
    _, grad = input_grad(net, x, y)
    lo, hi = feasible_bounds(x, epsilon, clip)
    delta = np.minimum(np.maximum(epsilon * np.sign(grad), lo), hi)
    return check_bounded(PerturbationSet(delta, provenance="fgsm"), epsilon)


def pgd(net, x, y, spec: AttackSpec, rng=None, trace=None):
    """Projected sign-gradient ascent for ``spec.steps`` iterations.

    ``trace``, when a list, receives the per-example loss evaluated before each
    step and after the last one.
    """
    rng = _rng(spec.seed if rng is None else rng)
    eps = spec.epsilon
    lo, hi = feasible_bounds(x, eps, spec.clip)
    if spec.steps == 0:
        return PerturbationSet(np.zeros_like(x, dtype=np.float64), provenance=spec.name)
    if spec.init == "uniform":
        delta = rng.uniform(-eps, eps, size=np.shape(x))
        delta = np.minimum(np.maximum(delta, lo), hi)
    else:
        delta = np.zeros_like(x, dtype=np.float64)
    step = spec.pgd_step
    for _ in range(spec.steps):
        losses, grad = input_grad(net, x, y, delta)
        if trace is not None:
            trace.append(losses)
        delta = np.minimum(np.maximum(delta + step * np.sign(grad), lo), hi)
    if trace is not None:
        trace.append(perturbed_loss(net, x, y, PerturbationSet(delta)))
    return check_bounded(PerturbationSet(delta, provenance=spec.name), eps)


def f_plus_fgsm(net, x, y, epsilon, rng=None, clip=False):
    """Uniform start in the ball, one sign step of 1.25 * epsilon, project."""
    rng = _rng(rng)
    lo, hi = feasible_bounds(x, epsilon, clip)
    delta = np.minimum(np.maximum(rng.uniform(-epsilon, epsilon, size=np.shape(x)), lo), hi)
    _, grad = input_grad(net, x, y, delta)
    delta = np.minimum(np.maximum(delta + 1.25 * epsilon * np.sign(grad), lo), hi)
    return check_bounded(PerturbationSet(delta, provenance="f-plus-fgsm"), epsilon)


def noise(kind, shape, epsilon, rng=None):
    rng = _rng(rng)
    if kind == "random-sign":
        delta = epsilon * np.sign(rng.uniform(-1.0, 1.0, size=shape))
    elif kind == "gaussian":
        delta = project_linf(rng.normal(0.0, epsilon / 2, size=shape), epsilon)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return check_bounded(PerturbationSet(delta, provenance=kind), epsilon)


def perturb(net, x, y, spec: AttackSpec, rng=None):
    """Dispatch on ``spec.kind``."""
    rng = _rng(spec.seed if rng is None else rng)
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "none" or spec.epsilon == 0:
        return PerturbationSet(np.zeros_like(x), provenance=spec.name)
    if spec.kind == "fgsm":
        return fgsm(net, x, y, spec.epsilon, clip=spec.clip)
    if spec.kind == "pgd":
        return pgd(net, x, y, spec, rng)
    if spec.kind == "f-plus-fgsm":
        return f_plus_fgsm(net, x, y, spec.epsilon, rng, clip=spec.clip)
    pset = noise(spec.kind, x.shape, spec.epsilon, rng)
    if spec.clip:
        lo, hi = feasible_bounds(x, spec.epsilon, True)
        pset.input_delta = np.minimum(np.maximum(pset.input_delta, lo), hi)
    return pset


def perturbed_loss(net, x, y, pset=None):
    """Per-example loss at the perturbed point (no gradients)."""
    out, _ = net.forward_tapped(x, pset, track_params=False)
    return np.asarray(net.loss(out, y).data)


def perturbed_logits(net, x, pset=None):
    out, _ = net.forward_tapped(x, pset, track_params=False)
    return out.data
