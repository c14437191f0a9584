"""Command line front door.

    apartlab train|evaluate|gap-series|transfer|sweep --config FILE [--seed N] [--out DIR]
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import Snapshot, cross_eval, epsilon_sweep, gap_series
from .config import ConfigError, load_config
from .data import load_dataset
from .models import ResidualNet
from .training import Trainer, TrainingHalted, evaluate

log = logging.getLogger("apartlab")

SUBCOMMANDS = ("train", "evaluate", "gap-series", "transfer", "sweep")


def _checkpoints(run_dir):
    paths = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {Path(run_dir) / 'checkpoints'}")
    return paths


def _analysis_subset(cfg, dataset):
    n = min(cfg.analysis.subset, len(dataset))
    rows = np.sort(np.random.default_rng([cfg.seed, 512]).choice(len(dataset), size=n, replace=False))
    return dataset.subset(rows)


def cmd_train(cfg, out, artifacts):
    train, test = load_dataset(cfg.dataset, cfg.seed)
    tc = cfg.train_config()
    net = ResidualNet(cfg.arch_config(train.in_shape, train.classes))
    trainer = Trainer(tc, net, train, test)
    metrics = out / "metrics.jsonl"
    timing = out / "timing.jsonl"
    metrics.write_text("")
    timing.write_text("")
    artifacts += ["metrics.jsonl", "timing.jsonl"]

    def on_epoch(tr, rec):
        io.append_jsonl(metrics, io.metrics_line(rec))
        io.append_jsonl(timing, json.dumps({"epoch": rec.epoch, "wall_time": rec.wall_time}) + "\n")
        if rec.epoch % cfg.train.checkpoint_every == 0 or rec.epoch == tc.epochs:
            name = f"checkpoints/epoch_{rec.epoch:04d}.ckpt"
            io.save_checkpoint(out / name, tr.net, rec.epoch, cfg.seed, tc.regime, tr.gen, tr.omega, tc.clip)
            artifacts.append(name)
        log.info("epoch %d loss %.4f train-robust %.3f clean %.3f robust %s", rec.epoch, rec.train_loss,
                 rec.train_robust_acc, rec.test_clean_acc, rec.test_robust_acc)

    try:
        trainer.run(on_epoch)
    finally:
        rows = io.summary_rows(trainer.records)
        if rows:
            io.write_csv(out / "summary.csv", list(rows[0]), rows)
            artifacts.append("summary.csv")


def cmd_evaluate(cfg, out, artifacts):
    path = cfg.evaluate.checkpoint or str(_checkpoints(cfg.out_dir if not cfg.analysis.run_dir else cfg.analysis.run_dir)[-1])
    ckpt = io.load_checkpoint(path)
    _, test = load_dataset(cfg.dataset, cfg.seed)
    res = evaluate(ckpt.net, test, cfg.eval_specs(), ckpt.seed, ckpt.epoch, cfg.evaluate.batch_size)
    clean = res.pop("clean")
    payload = {"checkpoint": str(path), "epoch": ckpt.epoch, "test_clean_acc": clean, "test_robust_acc": res}
    (out / "evaluate.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    artifacts.append("evaluate.json")
    print(json.dumps(payload, sort_keys=True))


def cmd_gap_series(cfg, out, artifacts):
    run_dir = cfg.analysis.run_dir or cfg.out_dir
    train, _ = load_dataset(cfg.dataset, cfg.seed)
    batch = _analysis_subset(cfg, train)
    snaps = []
    for p in _checkpoints(run_dir):
        c = io.load_checkpoint(p)
        snaps.append(Snapshot(c.epoch, c.net, c.generator))
    records = gap_series(snaps, cfg.source(cfg.analysis.gap_a), cfg.source(cfg.analysis.gap_b),
                         batch.x, batch.y, batch.index, cfg.seed)
    rows = [{"epoch": r.epoch, "gap": r.gap, "loss_A": r.loss_a, "loss_B": r.loss_b} for r in records]
    io.write_csv(out / "gap_series.csv", io.GAP_COLUMNS, rows)
    artifacts.append("gap_series.csv")


def cmd_transfer(cfg, out, artifacts):
    if not cfg.analysis.target_checkpoint:
        raise ConfigError("transfer needs analysis.target_checkpoint")
    target = io.load_checkpoint(cfg.analysis.target_checkpoint).net
    _, test = load_dataset(cfg.dataset, cfg.seed)
    source = cfg.source(cfg.analysis.transfer_source)
    noise = cfg.source(cfg.analysis.noise)
    rows = []
    for p in _checkpoints(cfg.analysis.run_dir or cfg.out_dir):
        c = io.load_checkpoint(p)
        src = c.generator if source == "generator" else source
        acc = cross_eval(target, src, c.net, test, cfg.seed, c.epoch, cfg.evaluate.batch_size)
        noise_acc = cross_eval(target, noise, c.net, test, cfg.seed, c.epoch, cfg.evaluate.batch_size)
        rows.append({"epoch": c.epoch, "source": cfg.analysis.transfer_source, "accuracy": acc,
                     "noise_accuracy": noise_acc})
    io.write_csv(out / "transfer.csv", io.TRANSFER_COLUMNS, rows)
    artifacts.append("transfer.csv")


def cmd_sweep(cfg, out, artifacts):
    if not cfg.analysis.sweep_epsilons:
        raise ConfigError("sweep needs analysis.sweep_epsilons")
    train, test = load_dataset(cfg.dataset, cfg.seed)
    tc = cfg.train_config()
    arch = cfg.arch_config(train.in_shape, train.classes)
    attack = cfg.source(cfg.analysis.sweep_attack)
    rows = epsilon_sweep(tc, lambda: ResidualNet(arch), train, test, cfg.analysis.sweep_epsilons, attack)
    io.write_csv(out / "sweep.csv", io.SWEEP_COLUMNS, rows)
    artifacts.append("sweep.csv")
    if any(r["status"] != "ok" for r in rows):
        raise TrainingHalted("some sweep cells failed", [])


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gap-series": cmd_gap_series,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
}


def run(subcommand, config_path, seed=None, out_dir=None):
    """Execute one subcommand; returns the process exit status."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    artifacts = []
    manifest = {
        "subcommand": subcommand,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "attack_clip": cfg.clip,
        "status": "ok",
        "artifacts": artifacts,
    }
    status = 0
    try:
        with io.DirLock(out):
            try:
                COMMANDS[subcommand](cfg, out, artifacts)
            except (TrainingHalted, FloatingPointError) as exc:
                manifest["status"] = "failed"
                manifest["failure"] = str(exc)
                print(f"run halted: {exc}", file=sys.stderr)
                status = 1
            except (ConfigError, FileNotFoundError, ValueError) as exc:
                manifest["status"] = "failed"
                manifest["failure"] = str(exc)
                print(f"error: {exc}", file=sys.stderr)
                status = 2
            manifest_name = "manifest.json" if subcommand == "train" else f"manifest-{subcommand}.json"
            io.write_manifest(out, manifest, manifest_name)
    except io.LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return status


def main(argv=None):
    parser = argparse.ArgumentParser(prog="apartlab", description=__doc__.strip().splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="YAML experiment file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.subcommand, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
