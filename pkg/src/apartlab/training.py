"""Training loops for every regime plus clean/robust evaluation."""
from __future__ import annotations

import hashlib
import re
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks
from .attacks import AttackSpec
from .data import apply_map, augment_maps, invert_map
from .generator import GeneratorParams, OmegaStore, apart_step
from .models import PerturbationSet, block_input_grads
from .tensor import Graph, NonFiniteError, forward_op

REGIMES = (
    "standard",
    "fgsm",
    "f-plus-fgsm",
    "pgd-n",
    "fgsm-plus",
    "apart",
    "apart-ablation-no-layerwise",
    "apart-ablation-no-init",
)
GENERATOR_REGIMES = ("fgsm-plus", "apart", "apart-ablation-no-layerwise", "apart-ablation-no-init")


class TrainingHalted(RuntimeError):
    """Raised on a non-finite loss; ``records`` holds the epochs completed so far."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainAttack:
    steps: int = 10  # pgd-n only
    step_size: float | None = None
    init: str = "uniform"


@dataclass
class GeneratorConfig:
    alpha_init: float | None = None  # default epsilon / 2
    alpha_omega: float | None = None  # default epsilon
    lambda_reg: float = 400.0
    mu_alpha_max: float = 5e-8
    mu_omega: float | str = "auto"
    omega_init: str = "zeros"


@dataclass
class TrainConfig:
    regime: str = "fgsm"
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    lr_max: float = 0.2
    weight_decay: float = 0.0
    epsilon: float = 8 / 255
    seed: int = 0
    clip: bool = False
    attack: TrainAttack = field(default_factory=TrainAttack)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval_attacks: list = field(default_factory=lambda: [AttackSpec("pgd", 8 / 255, 10)])
    eval_batch_size: int = 256
    augment: bool = False
    pad: int = 1

    def __post_init__(self):
        m = re.fullmatch(r"pgd-(\d+)", self.regime)
        if m:
            self.regime = "pgd-n"
            self.attack.steps = int(m.group(1))
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_max <= 0:
            raise ValueError("lr_max must be > 0")
        if self.generator.mu_alpha_max < 0:
            raise ValueError("generator.mu_alpha_max must be >= 0")
        if self.generator.lambda_reg < 0:
            raise ValueError("generator.lambda_reg must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_robust_acc: float
    test_clean_acc: float
    test_robust_acc: dict
    alpha: list | None = None
    wall_time: float = 0.0

    def row(self):
        """Deterministic fields only (no wall time)."""
        d = asdict(self)
        d.pop("wall_time")
        return d


def cyclic_lr(step, total, max_lr):
    """Triangle: 0 at ``step=0``, ``max_lr`` at ``total/2``, 0 at ``total``."""
    if total <= 0:
        raise ValueError("total must be positive")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    half = total / 2
    if step <= half:
        return max_lr * step / half
    return max_lr * (total - step) / half


def sgd_momentum_update(theta, grads, velocity, lr, momentum):
    """v' = momentum * v + g; theta' = theta - lr * v'. Works on arrays or dicts of arrays."""
    if isinstance(theta, dict):
        new_t, new_v = {}, {}
        for k in theta:
            new_t[k], new_v[k] = sgd_momentum_update(theta[k], grads[k], velocity[k], lr, momentum)
        return new_t, new_v
    grads = np.asarray(grads, dtype=np.float64)
    if np.shape(theta) != grads.shape:
        raise ValueError(f"parameter shape {np.shape(theta)} vs gradient shape {grads.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.argwhere(~np.isfinite(grads))[0]
        raise NonFiniteError(f"non-finite gradient at {tuple(bad)}", tuple(bad))
    v = momentum * velocity + grads
    return theta - lr * v, v


def param_hash(net):
    return hashlib.sha256(net.flat_params().tobytes()).hexdigest()


def _accuracy(logits, y):
    return float(np.mean(np.argmax(logits, axis=1) == y)) if len(y) else 0.0


def evaluate(net, dataset, attack_specs, seed=0, epoch=0, batch_size=256):
    """Clean accuracy plus accuracy under each attack, regenerated per batch.

    Never touches parameters. Returns ``{"clean": acc, attack.name: acc, ...}``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = {"clean": 0}
    for spec in attack_specs:
        correct[spec.name] = 0
    for b, (x, y, _) in enumerate(dataset.batches(batch_size)):
        correct["clean"] += int(np.sum(np.argmax(attacks.perturbed_logits(net, x), axis=1) == y))
        for a, spec in enumerate(attack_specs):
            rng = np.random.default_rng([seed, 7919, epoch, b, a])
            pset = attacks.perturb(net, x, y, spec, rng)
            logits = attacks.perturbed_logits(net, x, pset)
            correct[spec.name] += int(np.sum(np.argmax(logits, axis=1) == y))
    return {k: v / len(dataset) for k, v in correct.items()}


class _AugmentedOmega:
    """Omega store seen through one batch's augmentation maps."""

    def __init__(self, store, src):
        self.store, self.src = store, src
        self.shape = store.shape

    def get(self, idx):
        return apply_map(self.store.get(idx), self.src)

    def set(self, idx, batch):
        self.store.set(idx, invert_map(batch, self.src, self.store.get(idx)))


class Trainer:
    """Owns the mutable training state: parameters, velocity, generator, step count."""

    def __init__(self, config: TrainConfig, net, train_set, test_set=None):
        self.config = config
        self.net = net
        self.train_set = train_set
        self.test_set = test_set
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
        self.step = 0
        self.batches_per_epoch = -(-len(train_set) // config.batch_size)
        self.total_steps = self.batches_per_epoch * config.epochs
        self.records: list[MetricsRecord] = []
        self.gen = None
        self.omega = None
        if config.regime in GENERATOR_REGIMES:
            gc = config.generator
            self.gen = GeneratorParams.for_net(
                net,
                config.epsilon,
                alpha_init=gc.alpha_init,
                alpha_omega=gc.alpha_omega,
                lambda_reg=gc.lambda_reg,
                mu_omega=gc.mu_omega,
                layerwise=config.regime in ("apart", "apart-ablation-no-init"),
                learn_init=config.regime != "apart-ablation-no-init",
            )
            self.omega = OmegaStore(train_set.in_shape, gc.omega_init, config.seed)

    # -- single batch ----------------------------------------------------------

    def _perturb(self, x, y, idx, rng):
        c = self.config
        if c.regime == "standard":
            return None
        if c.regime == "fgsm":
            return attacks.fgsm(self.net, x, y, c.epsilon, clip=c.clip)
        if c.regime == "f-plus-fgsm":
            return attacks.f_plus_fgsm(self.net, x, y, c.epsilon, rng, clip=c.clip)
        if c.regime == "pgd-n":
            spec = AttackSpec("pgd", c.epsilon, c.attack.steps, c.attack.step_size, c.attack.init, clip=c.clip)
            return attacks.pgd(self.net, x, y, spec, rng)
        raise AssertionError(c.regime)

    def _theta_update(self, param_grads):
        c = self.config
        lr = cyclic_lr(self.step, self.total_steps, c.lr_max)
        grads = param_grads
        if c.weight_decay:
            grads = {k: g + c.weight_decay * self.net.params[k] for k, g in grads.items()}
        self.net.params, self.velocity = sgd_momentum_update(self.net.params, grads, self.velocity, lr, c.momentum)

    def train_batch(self, x, y, idx, rng):
        """One update. Returns ``(per-example losses, logits)`` on the perturbed batch."""
        c = self.config
        if c.augment and x.ndim == 4:
            src = augment_maps(x.shape[2:], c.pad, rng, len(x))
            x = apply_map(x, src)
        else:
            src = None
        if self.gen is not None:
            self.gen.mu_alpha = cyclic_lr(self.step, self.total_steps, c.generator.mu_alpha_max)
            omega = self.omega if src is None else _AugmentedOmega(self.omega, src)
            res = apart_step(self.net, x, y, self.gen, omega, idx, clip=c.clip)
            losses, logits, param_grads = res.losses, res.logits, res.param_grads
        else:
            pset = self._perturb(x, y, idx, rng)
            g = Graph()
            out, taps = self.net.forward_tapped(x, pset, graph=g)
            per = self.net.loss(out, y)
            loss = forward_op("mean", [per])
            block_input_grads(self.net, loss, taps)
            losses, logits, param_grads = per.data, out.data, taps.param_grads
        if not np.all(np.isfinite(losses)):
            raise NonFiniteError("non-finite training loss")
        self._theta_update(param_grads)
        self.step += 1
        return losses, logits

    # -- epochs ----------------------------------------------------------------

    def train_epoch(self, epoch):
        """Run all batches of epoch ``epoch`` (1-based) and evaluate."""
        c = self.config
        t0 = time.perf_counter()
        shuffle = np.random.default_rng([c.seed, epoch])
        loss_sum, correct, n = 0.0, 0, 0
        for b, (x, y, idx) in enumerate(self.train_set.batches(c.batch_size, shuffle)):
            rng = np.random.default_rng([c.seed, epoch, b, 1])
            try:
                losses, logits = self.train_batch(x, y, idx, rng)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingHalted(f"epoch {epoch} batch {b}: {exc}", list(self.records)) from exc
            loss_sum += float(np.sum(losses))
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            n += len(y)
        test = {"clean": float("nan")}
        if self.test_set is not None:
            test = evaluate(self.net, self.test_set, c.eval_attacks, c.seed, epoch, c.eval_batch_size)
        rec = MetricsRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_robust_acc=correct / n,
            test_clean_acc=test.pop("clean"),
            test_robust_acc=test,
            alpha=None if self.gen is None else [float(a) for a in self.gen.alpha],
            wall_time=time.perf_counter() - t0,
        )
        self.records.append(rec)
        return rec

    def run(self, on_epoch=None):
        for epoch in range(len(self.records) + 1, self.config.epochs + 1):
            rec = self.train_epoch(epoch)
            if on_epoch is not None:
                on_epoch(self, rec)
        return self.records


def train_epoch(config, net, gen_state, dataset, epoch_index, test_set=None):
    """Functional entry point. ``gen_state`` is a Trainer to continue, or None."""
    trainer = gen_state if isinstance(gen_state, Trainer) else Trainer(config, net, dataset, test_set)
    return trainer.train_epoch(epoch_index)
