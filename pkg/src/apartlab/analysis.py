"""Diagnostics: strength gap, exhaustive worst case, perturbation transfer, sweeps."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import attacks
from .attacks import AttackSpec
from .generator import GeneratorParams, OmegaStore, generate
from .models import PerturbationSet
from .training import Trainer, TrainingHalted, evaluate


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class BruteForce:
    """Worst case over a grid of the feasible box, refined around the best point."""

    epsilon: float
    grid: int = 101
    refine: int = 4
    budget: int = 10**6
    clip: bool = False

    @property
    def name(self):
        return "oracle"


@dataclass
class GeneratorSource:
    """Learned generator state used as a perturbation source (read-only)."""

    gen: GeneratorParams
    omega: OmegaStore
    clip: bool = False

    @property
    def name(self):
        return "apart" if self.gen.layerwise else "fgsm-plus"


class _FrozenOmega:
    def __init__(self, store):
        self.store = store
        self.shape = store.shape

    def get(self, idx):
        return np.stack([self.store.values[i] if i in self.store.values else self.store._fresh(i)
                         for i in np.asarray(idx).tolist()])


@dataclass
class GapRecord:
    epoch: int
    method_a: str
    method_b: str
    gap: float
    loss_a: float
    loss_b: float


def source_name(source):
    return source.name


def make_perturbation(net, x, y, source, rng, idx=None):
    """Perturbation from an AttackSpec, a BruteForce oracle or a GeneratorSource."""
    if isinstance(source, AttackSpec):
        return attacks.perturb(net, x, y, source, rng)
    if isinstance(source, BruteForce):
        delta, _ = brute_force_worst_case(net, x, y, source.epsilon, source.grid, source.refine,
                                          source.budget, source.clip)
        return PerturbationSet(delta, provenance="oracle")
    if isinstance(source, GeneratorSource):
        if idx is None:
            raise ValueError("a generator source needs the dataset indices of the batch")
        return generate(net, x, y, source.gen, _FrozenOmega(source.omega), idx, clip=source.clip).perturbation
    raise TypeError(f"unsupported perturbation source {type(source).__name__}")


def brute_force_worst_case(net, x, y, epsilon, grid=101, refine=4, budget=10**6, clip=False, chunk=20000):
    """Per-example maximiser of the loss over the feasible box by exhaustive grid search.

    The first pass covers ``grid`` points per input dimension (corners
    included). Each refinement pass lays a grid of the same size over the
    cell neighbourhood of the current best point. Returns ``(delta, loss)``
    arrays of shape ``x.shape`` and ``(B,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    dim = int(np.prod(x.shape[1:]))
    need = grid ** dim
    if need > budget:
        raise BudgetError(f"grid of {grid} points over {dim} dims needs {need} evaluations per example, budget is {budget}")
    lo_all, hi_all = attacks.feasible_bounds(x, epsilon, clip)
    best_delta = np.zeros_like(x)
    best_loss = np.zeros(len(x))
    for b in range(len(x)):
        lo = lo_all[b].reshape(-1)
        hi = hi_all[b].reshape(-1)
        cand_lo, cand_hi = lo.copy(), hi.copy()
        top, top_loss = None, -np.inf
        for _ in range(refine + 1):
            axes = [np.unique(np.concatenate([np.linspace(l, h, grid), [l, h]])) for l, h in zip(cand_lo, cand_hi)]
            cands = np.array(list(itertools.product(*axes)), dtype=np.float64)
            losses = _losses_at(net, x[b], y[b], cands, chunk)
            k = int(np.argmax(losses))
            if losses[k] > top_loss:
                top, top_loss = cands[k], float(losses[k])
            spacing = np.array([(ax[-1] - ax[0]) / max(len(ax) - 1, 1) for ax in axes])
            cand_lo = np.maximum(lo, top - 2 * spacing)
            cand_hi = np.minimum(hi, top + 2 * spacing)
        best_delta[b] = top.reshape(x.shape[1:])
        best_loss[b] = top_loss
    return best_delta, best_loss


def _losses_at(net, xb, yb, cands, chunk):
    out = []
    for s in range(0, len(cands), chunk):
        part = cands[s:s + chunk].reshape((-1,) + xb.shape)
        xs = np.broadcast_to(xb, part.shape)
        ys = np.full(len(part), yb)
        out.append(attacks.perturbed_loss(net, xs, ys, PerturbationSet(part)))
    return np.concatenate(out)


def strength_gap(net, source_a, source_b, x, y, idx=None, seed=0, epoch=0):
    """Mean loss under B minus mean loss under A, both on the same parameters.

    Both losses are taken at ``x + delta`` with the input perturbation only.
    A generator's block deltas shape its input step during generation but
    are not points of the input ball, so they do not enter the comparison.
    """
    if len(y) == 0:
        raise ValueError("strength gap needs a non-empty batch")
    rng_a = np.random.default_rng([seed, epoch, 104723])
    rng_b = np.random.default_rng([seed, epoch, 104729])
    pa = PerturbationSet(make_perturbation(net, x, y, source_a, rng_a, idx).input_delta)
    pb = PerturbationSet(make_perturbation(net, x, y, source_b, rng_b, idx).input_delta)
    loss_a = float(np.mean(attacks.perturbed_loss(net, x, y, pa)))
    loss_b = float(np.mean(attacks.perturbed_loss(net, x, y, pb)))
    return GapRecord(epoch, source_name(source_a), source_name(source_b), loss_b - loss_a, loss_a, loss_b)


def cross_eval(target_net, source, source_net, dataset, seed=0, epoch=0, batch_size=256):
    """Accuracy of ``target_net`` on inputs perturbed against ``source_net``.

    Only the input perturbation transfers; block deltas are tied to the
    source architecture and are dropped.
    """
    if target_net.arch.in_shape != source_net.arch.in_shape:
        raise ValueError(f"input shapes differ: {target_net.arch.in_shape} vs {source_net.arch.in_shape}")
    correct = 0
    for b, (x, y, idx) in enumerate(dataset.batches(batch_size)):
        rng = np.random.default_rng([seed, epoch, b, 31337])
        pset = make_perturbation(source_net, x, y, source, rng, idx)
        logits = attacks.perturbed_logits(target_net, x, PerturbationSet(pset.input_delta))
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(dataset)


@dataclass
class Snapshot:
    """One checkpointed state as consumed by the series analyses."""

    epoch: int
    net: object
    generator: GeneratorSource | None = None


def gap_series(snapshots, source_a, source_b, x, y, idx=None, seed=0):
    """One GapRecord per snapshot, in epoch order.

    ``source_a`` may be the string ``"generator"`` to use each snapshot's own
    learned generator.
    """
    if not snapshots:
        return []
    arch = snapshots[0].net.arch
    records = []
    last = None
    for snap in snapshots:
        if snap.net.arch != arch:
            raise ValueError(f"snapshot at epoch {snap.epoch} has a different architecture")
        if last is not None and snap.epoch < last:
            raise ValueError("snapshots must be in ascending epoch order")
        last = snap.epoch
        a = source_a
        if a == "generator":
            if snap.generator is None:
                raise ValueError(f"snapshot at epoch {snap.epoch} carries no generator state")
            a = snap.generator
        records.append(strength_gap(snap.net, a, source_b, x, y, idx, seed, snap.epoch))
    return records


def epsilon_sweep(train_config, make_net, train_set, test_set, epsilons, attack):
    """Train one model per training epsilon and evaluate it under ``attack``.

    ``make_net`` builds a fresh network. A failing cell is reported with its
    status and the sweep moves on.
    """
    rows = []
    for eps in epsilons:
        if eps < 0:
            raise ValueError(f"training epsilon must be >= 0, got {eps}")
        cfg = replace(train_config, epsilon=float(eps), eval_attacks=[])
        net = make_net()
        trainer = Trainer(cfg, net, train_set, None)
        try:
            trainer.run()
        except TrainingHalted as exc:
            rows.append({"epsilon": float(eps), "clean_acc": float("nan"), "robust_acc": float("nan"),
                         "status": f"halted: {exc}"})
            continue
        res = evaluate(net, test_set, [attack], cfg.seed, cfg.epochs, cfg.eval_batch_size)
        rows.append({"epsilon": float(eps), "clean_acc": res["clean"], "robust_acc": res[attack.name],
                     "status": "ok"})
    return rows


def overfitting_report(robust_acc, gaps, transfer, noise, late=5, collapse_ratio=0.5, noise_band=0.05):
    """Check a training run for the robustness-drop signature.

    All arguments are per-epoch sequences in epoch order: robust test accuracy
    of the run, its strength gaps, and the accuracy of a fixed target under the
    run's perturbations and under noise. ``late`` epochs at the end form the
    window for the transfer comparison.
    """
    robust_acc, gaps = np.asarray(robust_acc, float), np.asarray(gaps, float)
    transfer, noise = np.asarray(transfer, float), np.asarray(noise, float)
    if not (len(robust_acc) == len(gaps) == len(transfer) == len(noise)) or len(gaps) < 2:
        raise ValueError("need equally long per-epoch series with at least two epochs")
    late = min(late, len(gaps))
    peak = int(np.argmax(robust_acc))
    late_transfer = float(np.mean(transfer[-late:]))
    late_noise = float(np.mean(noise[-late:]))
    return {
        "peak_robust_acc": float(robust_acc[peak]),
        "peak_epoch": peak + 1,
        "final_robust_acc": float(robust_acc[-1]),
        "collapsed": bool(peak < len(robust_acc) - 1 and robust_acc[-1] <= collapse_ratio * robust_acc[peak]),
        "first_gap": float(gaps[0]),
        "final_gap": float(gaps[-1]),
        "gap_grew": bool(gaps[-1] > gaps[0]),
        "late_transfer_acc": late_transfer,
        "late_noise_acc": late_noise,
        "transfer_at_noise_level": bool(abs(late_transfer - late_noise) <= noise_band),
    }
