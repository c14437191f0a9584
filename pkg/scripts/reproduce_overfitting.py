"""Rerun the digits robustness-drop study and record its outcome.

Trains the PGD-10 reference model and the FGSM run, then computes the FGSM to
PGD-10 strength-gap series and the transfer of each epoch's FGSM perturbations
onto the reference model.  The verdict lands in ``<record>/report.json``
next to copies of the per-epoch tables.

    python3 scripts/make_digits_fixture.py
    python3 scripts/reproduce_overfitting.py [--runs runs/co] [--record results/digits-co]
"""
import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import yaml

from apartlab import cli
from apartlab.analysis import overfitting_report

ROOT = Path(__file__).resolve().parent.parent
FGSM_CONFIG = ROOT / "configs" / "digits-co-fgsm.yaml"
TARGET_CONFIG = ROOT / "configs" / "digits-co-target.yaml"
RECORDED = ("metrics.jsonl", "gap_series.csv", "transfer.csv")


def _localise(config_path, runs, **analysis):
    """Copy of a shipped config with absolute data paths and outputs under ``runs``."""
    data = yaml.safe_load(Path(config_path).read_text())
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        data["dataset"][key] = str(ROOT / data["dataset"][key])
    data["out_dir"] = str(runs / Path(data["out_dir"]).name)
    data.setdefault("analysis", {}).update(analysis)
    path = runs / f"{Path(config_path).stem}.yaml"
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path, Path(data["out_dir"])


def _jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def run_pipeline(runs):
    """Train both models, analyse, and return ``(report, fgsm_run_dir)``."""
    runs = Path(runs)
    runs.mkdir(parents=True, exist_ok=True)
    target_cfg, target_dir = _localise(TARGET_CONFIG, runs)
    if cli.run("train", target_cfg) != 0:
        raise RuntimeError("training the reference model failed")
    ckpt = sorted((target_dir / "checkpoints").glob("*.ckpt"))[-1]
    fgsm_cfg, fgsm_dir = _localise(FGSM_CONFIG, runs, target_checkpoint=str(ckpt))
    for step in ("train", "gap-series", "transfer"):
        if cli.run(step, fgsm_cfg) != 0:
            raise RuntimeError(f"{step} failed for {fgsm_cfg}")

    metrics = _jsonl(fgsm_dir / "metrics.jsonl")
    gaps = list(csv.DictReader(open(fgsm_dir / "gap_series.csv")))
    transfer = list(csv.DictReader(open(fgsm_dir / "transfer.csv")))
    report = overfitting_report(
        [m["test_robust_acc"]["pgd-10"] for m in metrics],
        [float(r["gap"]) for r in gaps],
        [float(r["accuracy"]) for r in transfer],
        [float(r["noise_accuracy"]) for r in transfer],
    )
    reference = _jsonl(target_dir / "metrics.jsonl")[-1]
    report["reference_clean_acc"] = reference["test_clean_acc"]
    report["reference_robust_acc"] = reference["test_robust_acc"]["pgd-10"]
    return report, fgsm_dir


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", default="runs/co", help="scratch directory for the two training runs")
    parser.add_argument("--record", default="results/digits-co", help="where the outcome is recorded")
    args = parser.parse_args()
    report, fgsm_dir = run_pipeline(args.runs)
    record = Path(args.record)
    record.mkdir(parents=True, exist_ok=True)
    for name in RECORDED:
        shutil.copyfile(fgsm_dir / name, record / name)
    (record / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["collapsed"] and report["gap_grew"] and report["transfer_at_noise_level"] else 1


if __name__ == "__main__":
    sys.exit(main())
