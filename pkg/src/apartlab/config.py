"""Experiment configuration: one YAML document per experiment.

The document maps onto :class:`ExperimentConfig`. Unknown keys and
wrongly-typed values are rejected before any computation starts. See
docs/config.md for the full schema and ``configs/`` for examples.
"""
from __future__ import annotations

import dataclasses
import re
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .analysis import BruteForce
from .attacks import AttackSpec
from .data import DatasetDescriptor
from .io import config_hash
from .models import ArchConfig
from .training import GeneratorConfig, TrainAttack, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    arch: str = "micro-preact"
    width: int = 32
    blocks: int = 3
    stem: bool = True
    kernel: int = 3
    init_seed: int | None = None  # defaults to the experiment seed


@dataclass
class AttackEntry:
    kind: str = "pgd"
    epsilon: float | None = None  # defaults to train.epsilon
    steps: int = 10
    step_size: float | None = None
    init: str = "uniform"
    clip: bool | None = None  # defaults to the dataset's image flag


@dataclass
class TrainSection:
    regime: str = "fgsm"
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    lr_max: float = 0.2
    weight_decay: float = 0.0
    epsilon: float = 8 / 255
    clip: bool | None = None
    checkpoint_every: int = 1
    attack: TrainAttack = field(default_factory=TrainAttack)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)


@dataclass
class EvaluateSection:
    attacks: list[AttackEntry] = field(default_factory=lambda: [AttackEntry()])
    checkpoint: str = ""
    batch_size: int = 256


@dataclass
class AnalysisSection:
    run_dir: str = ""  # training run whose checkpoints are analysed; default out_dir
    gap_a: str = "fgsm"
    gap_b: str = "pgd-10"
    subset: int = 512
    oracle_grid: int = 101
    target_checkpoint: str = ""
    transfer_source: str = "fgsm"
    noise: str = "random-sign"
    sweep_epsilons: list[float] = field(default_factory=list)
    sweep_attack: str = "pgd-10"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # -- derived objects ---------------------------------------------------

    @property
    def clip(self):
        return self.dataset.is_image if self.train.clip is None else self.train.clip

    def attack_spec(self, entry: AttackEntry):
        eps = self.train.epsilon if entry.epsilon is None else entry.epsilon
        clip = self.clip if entry.clip is None else entry.clip
        return AttackSpec(entry.kind, eps, entry.steps, entry.step_size, entry.init, self.seed, clip)

    def eval_specs(self):
        return [self.attack_spec(a) for a in self.evaluate.attacks]

    def train_config(self):
        t = self.train
        return TrainConfig(
            regime=t.regime, epochs=t.epochs, batch_size=t.batch_size, momentum=t.momentum, lr_max=t.lr_max,
            weight_decay=t.weight_decay, epsilon=t.epsilon, seed=self.seed, clip=self.clip,
            attack=dataclasses.replace(t.attack), generator=dataclasses.replace(t.generator),
            eval_attacks=self.eval_specs(), eval_batch_size=self.evaluate.batch_size,
            augment=self.dataset.augment, pad=self.dataset.pad,
        )

    def arch_config(self, in_shape, classes):
        m = self.model
        seed = self.seed if m.init_seed is None else m.init_seed
        return ArchConfig(m.arch, tuple(in_shape), classes, m.width, m.blocks, m.stem, m.kernel, seed)

    def source(self, name):
        """Perturbation source from a short name: fgsm, pgd-N, f-plus-fgsm,
        random-sign, gaussian, oracle, or generator (the run's learned state)."""
        if name == "generator":
            return "generator"
        if name == "oracle":
            return BruteForce(self.train.epsilon, self.analysis.oracle_grid, clip=self.clip)
        m = re.fullmatch(r"pgd-(\d+)", name)
        if m:
            return AttackSpec("pgd", self.train.epsilon, int(m.group(1)), None, "uniform", self.seed, self.clip)
        return AttackSpec(name, self.train.epsilon, 0, None, "uniform", self.seed, self.clip)

    def canonical(self):
        """Everything that affects results; ``out_dir`` is excluded."""
        d = asdict(self)
        d.pop("out_dir")
        return d

    def hash(self):
        return config_hash(self.canonical())


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for option in typing.get_args(tp):
            try:
                return _coerce(value, option, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if tp is type(None):
        if value is None:
            return None
        raise ConfigError(f"{where}: expected null, got {value!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is list or tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        return [_coerce(v, args[0], f"{where}[{i}]") if args else v for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp in (bool, str):
        if isinstance(value, tp):
            return value
    elif tp is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(value)
    else:
        return value
    raise ConfigError(f"{where}: expected {_type_name(tp)}, got {value!r}")


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def parse_config(data) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    try:
        cfg.train_config()
        for entry in cfg.evaluate.attacks:
            cfg.attack_spec(entry)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.train.checkpoint_every < 1:
        raise ConfigError("train.checkpoint_every must be >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(data)
