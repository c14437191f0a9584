"""Datasets: synthetic 2-D problems, IDX image files and CSV tables.

Every loader returns features scaled to [0, 1] and integer labels in
``[0, classes)``. Each example carries its index in the training set; the
generator keys its per-example state by that index.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

DATASET_KINDS = ("synthetic-moons", "synthetic-blobs", "idx-images", "csv-table")

IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGES_MAGIC = 0x00000803  # ubyte, 3 dims
LABELS_MAGIC = 0x00000801  # ubyte, 1 dim


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetDescriptor:
    kind: str = "synthetic-moons"
    n_train: int = 1000
    n_test: int = 500
    noise: float = 0.1
    features: int = 2  # synthetic-blobs dimensionality
    classes: int = 2
    cluster_std: float = 1.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    path: str = ""  # csv-table: one file, split by test_fraction
    test_fraction: float = 0.25
    label_column: str = "label"
    augment: bool = False
    pad: int = 1  # random-crop padding for augmentation
    limit_train: int = 0  # 0 = all
    limit_test: int = 0
    flatten: bool = False  # idx-images: present each image as a flat pixel vector

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.flatten and (self.kind != "idx-images" or self.augment):
            raise ValueError("flatten applies to idx-images without augmentation")

    @property
    def is_image(self):
        return self.kind == "idx-images"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    image: bool = False
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.index is None:
            self.index = np.arange(len(self.x))
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def in_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.x[rows], self.y[rows], self.classes, self.image, self.index[rows])

    def batches(self, batch_size, rng=None):
        """Yield ``(x, y, index)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            rows = order[start:start + batch_size]
            yield self.x[rows], self.y[rows], self.index[rows]


def _minmax(x, ref):
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((x - lo) / span, 0.0, 1.0)


def _synthetic(desc, seed):
    n = desc.n_train + desc.n_test
    if desc.kind == "synthetic-moons":
        x, y = make_moons(n_samples=n, noise=desc.noise, random_state=seed)
        classes = 2
    else:
        x, y = make_blobs(n_samples=n, n_features=desc.features, centers=desc.classes,
                          cluster_std=desc.cluster_std, random_state=seed)
        classes = desc.classes
    x = _minmax(x.astype(np.float64), x[: desc.n_train])
    y = y.astype(np.int64)
    train = Dataset(x[: desc.n_train], y[: desc.n_train], classes)
    test = Dataset(x[desc.n_train:], y[desc.n_train:], classes)
    return train, test


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic=None):
    """Parse an IDX file: 4-byte big-endian magic, big-endian u32 dims, raw data."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic at offset 0: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: bad magic at offset 0: first two bytes must be zero, found 0x{magic:08x}")
    dtype = IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise DataFormatError(f"{path}: unknown IDX type code 0x{raw[2]:02x} at offset 2")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension list at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    need = header + count * dtype.itemsize
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} bytes for dims {dims}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header, count=count).reshape(dims)


def write_idx(path, array):
    """Write ``array`` (uint8 or float64) as an IDX file."""
    array = np.asarray(array)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.float64): 0x0E, np.dtype(np.int32): 0x0C}
    code = codes.get(array.dtype)
    if code is None:
        raise DataFormatError(f"cannot write dtype {array.dtype} as IDX")
    big = array.astype(array.dtype.newbyteorder(">"), copy=False)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(big.tobytes())


def _idx_split(images, labels, classes, limit):
    x = read_idx(images, IMAGES_MAGIC)
    y = read_idx(labels, LABELS_MAGIC).astype(np.int64)
    if len(x) != len(y):
        raise DataFormatError(f"{images} has {len(x)} images but {labels} has {len(y)} labels")
    bad = np.flatnonzero((y < 0) | (y >= classes))
    if bad.size:
        raise DataFormatError(f"{labels}: label {y[bad[0]]} at row {bad[0]} outside [0, {classes})")
    if limit:
        x, y = x[:limit], y[:limit]
    x = x.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, y, classes, image=True)


def _csv_table(desc, seed):
    with open(desc.path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{desc.path}: empty file") from None
        if desc.label_column not in header:
            raise DataFormatError(f"{desc.path}: header {header} has no {desc.label_column!r} column")
        li = header.index(desc.label_column)
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataFormatError(f"{desc.path}: row {row_no} has {len(row)} fields, header has {len(header)}")
            try:
                label = int(row[li])
                values = [float(v) for j, v in enumerate(row) if j != li]
            except ValueError as exc:
                raise DataFormatError(f"{desc.path}: row {row_no}: {exc}") from None
            if not 0 <= label < desc.classes:
                raise DataFormatError(f"{desc.path}: label {label} at row {row_no} outside [0, {desc.classes})")
            feats.append(values)
            labels.append(label)
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(desc.test_fraction * len(y)))
    tr, te = order[n_test:], order[:n_test]
    x = _minmax(x, x[tr])
    return Dataset(x[tr], y[tr], desc.classes), Dataset(x[te], y[te], desc.classes)


def load_dataset(desc: DatasetDescriptor, seed=0):
    """Return ``(train, test)`` with features in [0, 1]."""
    if desc.kind in ("synthetic-moons", "synthetic-blobs"):
        train, test = _synthetic(desc, seed)
    elif desc.kind == "idx-images":
        train = _idx_split(desc.train_images, desc.train_labels, desc.classes, desc.limit_train)
        test = _idx_split(desc.test_images, desc.test_labels, desc.classes, desc.limit_test)
        if desc.flatten:
            train, test = (Dataset(d.x.reshape(len(d), -1), d.y, d.classes) for d in (train, test))
    else:
        train, test = _csv_table(desc, seed)
    if desc.limit_train and not desc.is_image:
        train = train.subset(np.arange(min(desc.limit_train, len(train))))
    if desc.limit_test and not desc.is_image:
        test = test.subset(np.arange(min(desc.limit_test, len(test))))
    train.index = np.arange(len(train))
    return train, test


# -- augmentation -----------------------------------------------------------

def augment_maps(shape, pad, rng, n):
    """Per-example gather maps for random flip + pad-and-crop.

    Returns ``src`` of shape ``(n, H, W)`` holding, for every output pixel,
    the flat source pixel index or -1 where the crop reads padding.
    """
    H, W = shape
    rows = np.arange(H)
    cols = np.arange(W)
    out = np.empty((n, H, W), dtype=np.int64)
    for k in range(n):
        dy, dx = rng.integers(-pad, pad + 1, size=2)
        flip = rng.random() < 0.5
        r = rows + dy
        c = cols + dx
        if flip:
            c = c[::-1]
        valid = (r[:, None] >= 0) & (r[:, None] < H) & (c[None, :] >= 0) & (c[None, :] < W)
        out[k] = np.where(valid, r[:, None] * W + c[None, :], -1)
    return out


def apply_map(batch, src):
    """Gather ``batch`` (n, C, H, W) through ``src``; padding reads as zero."""
    n, C, H, W = batch.shape
    flat = batch.reshape(n, C, H * W)
    idx = np.clip(src, 0, None).reshape(n, 1, H * W)
    out = np.take_along_axis(flat, np.broadcast_to(idx, (n, C, H * W)), axis=2)
    out = np.where(src.reshape(n, 1, H * W) >= 0, out, 0.0)
    return out.reshape(n, C, H, W)


def invert_map(augmented, src, original):
    """Scatter ``augmented`` back through ``src``; pixels never seen keep ``original``."""
    n, C, H, W = augmented.shape
    out = original.reshape(n, C, H * W).copy()
    aug = augmented.reshape(n, C, H * W)
    for k in range(n):
        s = src[k].reshape(-1)
        seen = s >= 0
        out[k][:, s[seen]] = aug[k][:, seen]
    return out.reshape(n, C, H, W)
