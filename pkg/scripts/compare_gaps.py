"""Train FGSM and APART on two moons and compare their gaps to the oracle.

The gap is the loss under the brute-force worst case minus the loss under the
training-time perturbation, per epoch, on the same training subset.

    python3 scripts/compare_gaps.py [--runs runs/gaps]
"""
import argparse
import csv
import sys
from pathlib import Path

import yaml

from apartlab import cli

ROOT = Path(__file__).resolve().parent.parent
RUNS = {"fgsm": ("moons-fgsm.yaml", "fgsm"), "apart": ("moons-apart.yaml", "generator")}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", default="runs/gaps")
    runs = Path(parser.parse_args().runs)
    runs.mkdir(parents=True, exist_ok=True)
    series = {}
    for name, (config, source) in RUNS.items():
        data = yaml.safe_load((ROOT / "configs" / config).read_text())
        data["train"]["epochs"] = 10
        data["out_dir"] = str(runs / name)
        data.setdefault("analysis", {}).update(gap_a=source, gap_b="oracle", oracle_grid=41, subset=256)
        path = runs / f"{name}.yaml"
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        for step in ("train", "gap-series"):
            if cli.run(step, path) != 0:
                return 1
        series[name] = [float(r["gap"]) for r in csv.DictReader(open(runs / name / "gap_series.csv"))]

    print("epoch  G[fgsm->oracle]  G[apart->oracle]")
    for epoch, (f, a) in enumerate(zip(series["fgsm"], series["apart"]), start=1):
        print(f"{epoch:5d}  {f:15.5f}  {a:16.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
