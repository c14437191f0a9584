"""Checkpoints, metrics streams, CSV exports and run manifests.

Checkpoint layout (all integers little-endian)::

    offset 0   4 bytes   magic b"APCK"
    offset 4   u32       format version (1)
    offset 8   u64       header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted, separators (",", ":")
    then       arrays    raw little-endian data, in header["arrays"] order

Each ``header["arrays"]`` entry is ``{"name", "dtype", "shape"}`` with dtype
``"<f8"`` or ``"<i8"``. See docs/formats.md.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import GeneratorSource
from .generator import GeneratorParams, OmegaStore
from .models import ArchConfig, ResidualNet

MAGIC = b"APCK"
VERSION = 1

GAP_COLUMNS = ("epoch", "gap", "loss_A", "loss_B")
TRANSFER_COLUMNS = ("epoch", "source", "accuracy", "noise_accuracy")
SWEEP_COLUMNS = ("epsilon", "clean_acc", "robust_acc", "status")


class CheckpointError(ValueError):
    pass


class LockError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    net: ResidualNet
    epoch: int
    seed: int
    regime: str = ""
    generator: GeneratorSource | None = None


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(net, epoch, seed, regime="", gen=None, omega=None, clip=False):
    arrays = [("theta", net.flat_params())]
    header = {
        "arch": net.arch.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "regime": regime,
        "generator": None,
    }
    if gen is not None:
        keys = sorted(omega.values) if omega is not None else []
        header["generator"] = {
            "alpha_omega": float(gen.alpha_omega),
            "epsilon": float(gen.epsilon),
            "lambda_reg": float(gen.lambda_reg),
            "mu_alpha": float(gen.mu_alpha),
            "mu_omega": gen.mu_omega if gen.mu_omega == "auto" else float(gen.mu_omega),
            "layerwise": bool(gen.layerwise),
            "learn_init": bool(gen.learn_init),
            "omega_init": omega.init if omega is not None else "zeros",
            "omega_shape": list(omega.shape) if omega is not None else [],
            "clip": bool(clip),
        }
        arrays.append(("alpha", gen.alpha))
        arrays.append(("omega_index", np.asarray(keys, dtype=np.int64)))
        arrays.append(("omega", np.stack([omega.values[k] for k in keys]) if keys
                       else np.zeros((0,) + tuple(omega.shape if omega is not None else ()))))
    header["arrays"] = []
    payload = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = "<i8" if arr.dtype.kind in "iu" else "<f8"
        arr = np.ascontiguousarray(arr, dtype=dt)
        header["arrays"].append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    head = _canonical(header).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(payload)


def save_checkpoint(path, net, epoch, seed, regime="", gen=None, omega=None, clip=False):
    data = checkpoint_bytes(net, epoch, seed, regime, gen, omega, clip)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        end = off + count * dt.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy()
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    a = header["arch"]
    net = ResidualNet(ArchConfig(**{**a, "in_shape": tuple(a["in_shape"])}))
    net.set_flat_params(arrays["theta"])
    source = None
    g = header["generator"]
    if g is not None:
        gen = GeneratorParams(arrays["alpha"], g["alpha_omega"], g["epsilon"], g["lambda_reg"], g["mu_alpha"],
                              g["mu_omega"], g["layerwise"], g["learn_init"])
        omega = OmegaStore(tuple(g["omega_shape"]), g["omega_init"], header["seed"])
        for i, v in zip(arrays["omega_index"].tolist(), arrays["omega"]):
            omega.values[i] = v
        source = GeneratorSource(gen, omega, g["clip"])
    return Checkpoint(net, header["epoch"], header["seed"], header["regime"], source)


def checkpoint_to_bytes(ckpt: Checkpoint):
    gen = ckpt.generator
    return checkpoint_bytes(ckpt.net, ckpt.epoch, ckpt.seed, ckpt.regime,
                            gen.gen if gen else None, gen.omega if gen else None, gen.clip if gen else False)


# -- tabular outputs ------------------------------------------------------------

def metrics_line(record):
    return json.dumps(record.row(), sort_keys=True) + "\n"


def append_jsonl(path, line):
    with open(path, "a") as fh:
        fh.write(line)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def summary_rows(records):
    rows = []
    for r in records:
        row = {"epoch": r.epoch, "train_loss": r.train_loss, "train_robust_acc": r.train_robust_acc,
               "test_clean_acc": r.test_clean_acc}
        for k, v in sorted(r.test_robust_acc.items()):
            row[f"test_{k}_acc"] = v
        rows.append(row)
    return rows


def config_hash(canonical_dict):
    return hashlib.sha256(_canonical(canonical_dict).encode("utf-8")).hexdigest()


def write_manifest(out_dir, payload, name="manifest.json"):
    path = Path(out_dir) / name
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


class DirLock:
    """Exclusive ownership of an output directory via an O_EXCL lock file."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False
