"""Learnable perturbation generator with layer-wise step sizes.

State:

* ``omega`` -- one start point per training example, every coordinate in
  [-1, 1]; the input perturbation starts at ``alpha_omega * omega``.
* ``alpha`` -- one step size per perturbation site. Site 0 is the model
  input, site ``k`` the k-th entry of ``net.delta_blocks``.

A training step takes two forward/backward rounds. Round one evaluates the
loss at ``x + alpha_omega * omega`` and reads the gradient at every site.
Round two injects ``alpha_k * sign(grad_k)`` at every site (the input one
clamped to the feasible box), and its single backward gives gradients for
theta, omega and alpha. The signs from round one are treated as constants,
so the generator gradients are first order only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import _check_finite, feasible_bounds
from .models import PerturbationSet, block_input_grads
from .tensor import Graph, NonFiniteError, forward_op


@dataclass
class GeneratorParams:
    alpha: np.ndarray
    alpha_omega: float
    epsilon: float
    lambda_reg: float = 400.0
    mu_alpha: float = 0.0
    mu_omega: float | str = "auto"
    layerwise: bool = True
    learn_init: bool = True

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("step sizes must be finite")
        if self.mu_omega != "auto" and not isinstance(self.mu_omega, (int, float)):
            raise ValueError(f"mu_omega must be a number or 'auto', got {self.mu_omega!r}")

    @classmethod
    def for_net(cls, net, epsilon, alpha_init=None, alpha_omega=None, **kw):
        """Every step size starts at the same value (default epsilon / 2)."""
        n_sites = 1 + len(net.delta_blocks)
        a0 = epsilon / 2 if alpha_init is None else alpha_init
        a_omega = epsilon if alpha_omega is None else alpha_omega
        return cls(np.full(n_sites, a0), a_omega, epsilon, **kw)

    def effective_mu_omega(self):
        if self.mu_omega == "auto":
            return self.alpha[0] / self.alpha_omega if self.alpha_omega else 0.0
        return float(self.mu_omega)

    def copy(self):
        return GeneratorParams(self.alpha.copy(), self.alpha_omega, self.epsilon, self.lambda_reg,
                               self.mu_alpha, self.mu_omega, self.layerwise, self.learn_init)


class OmegaStore:
    """Per-example start points keyed by dataset index.

    Missing entries are created on first access (zeros, or uniform in
    [-1, 1] seeded by ``(seed, index)``).
    """

    def __init__(self, shape, init="zeros", seed=0):
        if init not in ("zeros", "uniform"):
            raise ValueError(f"omega init must be 'zeros' or 'uniform', got {init!r}")
        self.shape = tuple(shape)
        self.init = init
        self.seed = seed
        self.values: dict[int, np.ndarray] = {}

    def _fresh(self, i):
        if self.init == "zeros":
            return np.zeros(self.shape)
        return np.random.default_rng([self.seed, i]).uniform(-1.0, 1.0, size=self.shape)

    def get(self, idx):
        out = []
        for i in np.asarray(idx).tolist():
            v = self.values.get(i)
            if v is None:
                v = self.values[i] = self._fresh(i)
            out.append(v)
        return np.stack(out) if out else np.zeros((0,) + self.shape)

    def set(self, idx, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.min(initial=0.0) < -1.0 or batch.max(initial=0.0) > 1.0:
            raise ValueError("omega values must stay within [-1, 1]")
        for i, v in zip(np.asarray(idx).tolist(), batch):
            self.values[i] = v.copy()

    def __len__(self):
        return len(self.values)


@dataclass
class StepResult:
    """What one generator step produced.

    ``perturbation`` holds plain arrays (input delta and block deltas) as
    applied in round two. ``losses``/``logits`` come from the round-two
    forward and ``param_grads`` from its backward.
    """

    perturbation: PerturbationSet
    losses: np.ndarray = None
    logits: np.ndarray = None
    param_grads: dict = None
    alpha_grad: np.ndarray = None
    omega_grad: np.ndarray = None
    signs: list = field(default_factory=list)


def init_delta1(gen: GeneratorParams, omega: OmegaStore, idx):
    """Starting input perturbation ``alpha_omega * omega_x``."""
    if not gen.learn_init:
        return np.zeros((len(np.asarray(idx)),) + omega.shape)
    return omega.get(idx) * gen.alpha_omega


def _sites(net, gen):
    return net.delta_blocks if gen.layerwise else []


def generate(net, x, y, gen: GeneratorParams, omega: OmegaStore, idx, clip=False, layerwise=None):
    """Round one: one forward at ``x + delta_1``, one backward, then the sign steps.

    Returns a StepResult whose perturbation holds ``delta_1`` (clamped to the
    feasible box) and ``alpha_k * sign(dL/dx_k)`` for each block site.
    """
    if layerwise is not None and layerwise != gen.layerwise:
        gen = gen.copy()
        gen.layerwise = layerwise
    x = np.asarray(x, dtype=np.float64)
    d1 = init_delta1(gen, omega, idx)
    g = Graph()
    out, taps = net.forward_tapped(x, PerturbationSet(d1), graph=g, track_params=False)
    loss = forward_op("mean", [net.loss(out, y)])
    grads = block_input_grads(net, loss, taps)
    signs = [np.sign(grads[0])]
    for i in _sites(net, gen):
        _check_finite(grads[i])
        signs.append(np.sign(grads[i]))
    _check_finite(grads[0])

    lo, hi = feasible_bounds(x, gen.epsilon, clip)
    delta1 = np.minimum(np.maximum(d1 + gen.alpha[0] * signs[0], lo), hi)
    blocks = {i: gen.alpha[k] * s for k, (i, s) in enumerate(zip(_sites(net, gen), signs[1:]), start=1)}
    pset = PerturbationSet(delta1, blocks, provenance="apart" if gen.layerwise else "fgsm-plus")
    return StepResult(pset, signs=signs)


def second_round(net, x, y, gen: GeneratorParams, omega: OmegaStore, idx, first: StepResult, clip=False):
    """Round two: forward with all deltas, one backward for theta, omega and alpha.

    The deltas are rebuilt on the tape from leaves ``omega`` and ``alpha`` so
    that the same backward yields their first-order gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    sites = _sites(net, gen)
    alphas = [g.leaf(gen.alpha[k], requires_grad=True, name=f"alpha{k}") for k in range(len(gen.alpha))]
    lo, hi = feasible_bounds(x, gen.epsilon, clip)
    if gen.learn_init:
        om = g.leaf(omega.get(idx), requires_grad=True, name="omega")
        start = om * float(gen.alpha_omega)
    else:
        om = None
        start = g.constant(np.zeros_like(x))
    d1 = forward_op("clamp", [start + alphas[0] * first.signs[0]], lo=lo, hi=hi)
    blocks = {i: alphas[k] * first.signs[k] for k, i in enumerate(sites, start=1)}
    out, taps = net.forward_tapped(x, PerturbationSet(d1, blocks), graph=g, track_params=True)
    losses = net.loss(out, y)
    loss = forward_op("mean", [losses])
    block_input_grads(net, loss, taps)
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss in second round")
    alpha_grad = np.array([a.grad if a.grad is not None else 0.0 for a in alphas], dtype=np.float64)
    omega_grad = None
    if om is not None:
        omega_grad = om.grad if om.grad is not None else np.zeros_like(om.data)
    pset = PerturbationSet(d1.data, {i: t.data for i, t in blocks.items()}, provenance=first.perturbation.provenance)
    return StepResult(pset, np.asarray(losses.data), out.data, taps.param_grads, alpha_grad, omega_grad, first.signs)


def update_generator(gen: GeneratorParams, omega: OmegaStore, idx, step: StepResult):
    """Gradient ascent on the generator, in place.

    omega <- clamp(omega + mu_omega * sign(dL/domega), -1, 1)
    alpha <- alpha + mu_alpha * (dL/dalpha - 2 * lambda * alpha)
    """
    if gen.learn_init and step.omega_grad is not None:
        mu_omega = gen.effective_mu_omega()
        new = np.clip(omega.get(idx) + mu_omega * np.sign(step.omega_grad), -1.0, 1.0)
        omega.set(idx, new)
    n = len(step.signs)  # active sites only
    grad = step.alpha_grad[:n]
    gen.alpha[:n] = gen.alpha[:n] + gen.mu_alpha * (grad - gen.lambda_reg * 2.0 * gen.alpha[:n])
    if not np.all(np.isfinite(gen.alpha)):
        raise NonFiniteError(f"step sizes became non-finite: {gen.alpha}")
    return gen, omega


def apart_step(net, x, y, gen, omega, idx, clip=False, layerwise=None):
    """Both rounds plus the generator update. Theta is left to the caller."""
    if layerwise is not None and layerwise != gen.layerwise:
        view = gen.copy()
        view.layerwise = layerwise
        result = apart_step(net, x, y, view, omega, idx, clip)
        gen.alpha[:] = view.alpha
        return result
    first = generate(net, x, y, gen, omega, idx, clip)
    second = second_round(net, x, y, gen, omega, idx, first, clip)
    update_generator(gen, omega, idx, second)
    return second


def fgsm_plus_step(net, x, y, gen, omega, idx, clip=False):
    """Input-only variant: learnable start point and step, no block deltas."""
    return apart_step(net, x, y, gen, omega, idx, clip, layerwise=False)
