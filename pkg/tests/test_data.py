import gzip
import struct

import numpy as np
import pytest

from apartlab.data import (
    DataFormatError,
    Dataset,
    DatasetDescriptor,
    apply_map,
    augment_maps,
    invert_map,
    load_dataset,
    read_idx,
    write_idx,
)


def _write_pair(tmp_path, images, labels, stem="train"):
    ip, lp = tmp_path / f"{stem}-images.idx", tmp_path / f"{stem}-labels.idx"
    write_idx(ip, images)
    write_idx(lp, labels)
    return str(ip), str(lp)


def _idx_desc(tmp_path, images, labels, classes=3):
    ip, lp = _write_pair(tmp_path, images, labels)
    return DatasetDescriptor("idx-images", train_images=ip, train_labels=lp, test_images=ip, test_labels=lp,
                             classes=classes)


def test_moons_are_seeded():
    desc = DatasetDescriptor("synthetic-moons", n_train=150, n_test=50)
    a, b = load_dataset(desc, seed=7), load_dataset(desc, seed=7)
    for u, v in zip(a, b):
        assert u.x.tobytes() == v.x.tobytes() and u.y.tobytes() == v.y.tobytes()
    assert load_dataset(desc, seed=8)[0].x.tobytes() != a[0].x.tobytes()


@pytest.mark.parametrize("kind", ["synthetic-moons", "synthetic-blobs"])
def test_synthetic_features_are_scaled_from_the_training_split(kind):
    train, test = load_dataset(DatasetDescriptor(kind, n_train=120, n_test=60, features=3, classes=4), seed=0)
    assert train.x.min() == 0.0 and train.x.max() == 1.0
    assert 0.0 <= test.x.min() and test.x.max() <= 1.0
    assert np.array_equal(train.index, np.arange(120))


def test_idx_round_trip_and_normalisation(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    train, test = load_dataset(_idx_desc(tmp_path, imgs, labels), seed=0)
    assert train.x.shape == (5, 1, 4, 4) and train.image
    assert 0.0 <= train.x.min() and train.x.max() <= 1.0
    np.testing.assert_array_equal(train.x[:, 0] * 255.0, imgs)
    np.testing.assert_array_equal(test.y, labels)


def test_gzipped_idx_is_read(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 2, 2)
    plain = tmp_path / "a.idx"
    write_idx(plain, arr)
    gz = tmp_path / "a.idx.gz"
    gz.write_bytes(gzip.compress(plain.read_bytes()))
    np.testing.assert_array_equal(read_idx(gz), arr)


def test_wrong_magic_names_expected_and_found(tmp_path):
    imgs = np.zeros((2, 3, 3), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, imgs, np.zeros(2, dtype=np.uint8))
    desc = DatasetDescriptor("idx-images", train_images=lp, train_labels=ip, test_images=ip, test_labels=lp)
    with pytest.raises(DataFormatError, match=r"offset 0: expected 0x00000803, found 0x00000801"):
        load_dataset(desc)


def test_corrupt_idx_headers(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(DataFormatError, match="first two bytes"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(DataFormatError, match="type code 0x07 at offset 2"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 3) + b"\x00")
    with pytest.raises(DataFormatError, match="expected 11 bytes"):
        read_idx(p)


def test_idx_label_out_of_range_names_the_row(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    with pytest.raises(DataFormatError, match="label 7 at row 2"):
        load_dataset(_idx_desc(tmp_path, imgs, np.array([0, 1, 7], dtype=np.uint8)))


def _csv(tmp_path, text):
    p = tmp_path / "t.csv"
    p.write_text(text)
    return DatasetDescriptor("csv-table", path=str(p), classes=2, test_fraction=0.5)


def test_csv_table_loads_and_scales(tmp_path):
    desc = _csv(tmp_path, "a,label,b\n0,0,10\n1,1,20\n2,0,30\n3,1,40\n")
    train, test = load_dataset(desc, seed=0)
    assert len(train) == 2 and len(test) == 2 and train.x.shape[1] == 2
    assert train.x.min() == 0.0 and train.x.max() == 1.0


@pytest.mark.parametrize(
    "text, message",
    [
        ("a,b\n1,2\n", "no 'label' column"),
        ("a,label\n1,0\n2\n", "row 2 has 1 fields"),
        ("a,label\n1,0\n2,5\n", "label 5 at row 2"),
        ("a,label\nx,0\n", "row 1"),
        ("", "empty file"),
    ],
)
def test_csv_errors(tmp_path, text, message):
    with pytest.raises(DataFormatError, match=message):
        load_dataset(_csv(tmp_path, text))


def test_unknown_kind_is_rejected():
    with pytest.raises(ValueError):
        DatasetDescriptor("cifar10")


def test_dataset_batches_cover_every_row_once():
    ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, int), 2)
    seen = np.concatenate([idx for _, _, idx in ds.batches(3, np.random.default_rng(0))])
    assert sorted(seen) == list(range(10))


def test_augmentation_map_inverts_on_visible_pixels():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(6, 2, 5, 5))
    src = augment_maps((5, 5), 2, np.random.default_rng(0), 6)
    aug = apply_map(x, src)
    back = invert_map(aug, src, x)
    np.testing.assert_array_equal(back, x)
    # a blank original shows which pixels the crop kept
    kept = invert_map(aug, src, np.zeros_like(x))
    assert np.all((kept == 0) | (kept == x))


def test_augmentation_without_padding_is_a_flip_or_identity():
    x = np.random.default_rng(0).uniform(size=(8, 1, 3, 3))
    out = apply_map(x, augment_maps((3, 3), 0, np.random.default_rng(1), 8))
    for a, b in zip(out, x):
        assert np.array_equal(a, b) or np.array_equal(a, b[..., ::-1])


def test_flattened_idx_images_are_vectors(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    ip, lp = _write_pair(tmp_path, imgs, np.array([0, 1], dtype=np.uint8))
    desc = DatasetDescriptor("idx-images", train_images=ip, train_labels=lp, test_images=ip, test_labels=lp,
                             classes=2, flatten=True)
    train, _ = load_dataset(desc)
    assert train.x.shape == (2, 9) and not train.image
    np.testing.assert_array_equal(train.x * 255.0, imgs.reshape(2, 9))
    with pytest.raises(ValueError, match="flatten"):
        DatasetDescriptor("idx-images", flatten=True, augment=True)
    with pytest.raises(ValueError, match="flatten"):
        DatasetDescriptor("synthetic-moons", flatten=True)
