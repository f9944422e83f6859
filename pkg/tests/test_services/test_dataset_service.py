from builtins import bytes
import gzip
import struct
import numpy as np
import pytest

from app.services.dataset_service import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, Dataset, load_dataset, load_idx,
                                          parse_idx, split, synthetic_rank2, two_gaussians)
from app.utils.exceptions import DatasetError, FormatError


def idx_bytes(magic, array):
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


@pytest.fixture
def idx_dir(tmp_path, rng):
    images = rng.integers(0, 256, size=(6, 4, 4))
    labels = np.array([0, 1, 2, 1, 0, 2])
    (tmp_path / "train-images-idx3-ubyte").write_bytes(idx_bytes(IDX_IMAGES_MAGIC, images))
    with gzip.open(tmp_path / "train-labels-idx1-ubyte.gz", "wb") as handle:
        handle.write(idx_bytes(IDX_LABELS_MAGIC, labels))
    return tmp_path, images, labels


# Tests for the synthetic tasks
def test_synthetic_rank2_is_seeded():
    first = synthetic_rank2(seed=5, samples=32)
    second = synthetic_rank2(seed=5, samples=32)
    assert np.array_equal(first.x, second.x)
    assert np.array_equal(first.y, second.y)
    assert first.feature_shape == (64,)
    assert first.y.max() < 10


def test_synthetic_rank2_seed_changes_data():
    assert not np.array_equal(synthetic_rank2(seed=1, samples=32).x, synthetic_rank2(seed=2, samples=32).x)


def test_two_gaussians_labels():
    data = two_gaussians(seed=0, samples=100, features=4)
    assert data.num_classes == 2
    assert set(np.unique(data.y)) <= {0, 1}


def test_dataset_length_mismatch():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, 2)), np.zeros(2), 2)


# Tests for the IDX reader
def test_parse_idx():
    array = np.arange(12).reshape(3, 4)
    parsed = parse_idx(idx_bytes(IDX_IMAGES_MAGIC - 1, array), IDX_IMAGES_MAGIC - 1)
    assert np.array_equal(parsed, array)


def test_parse_idx_wrong_magic():
    with pytest.raises(FormatError, match="magic"):
        parse_idx(idx_bytes(IDX_LABELS_MAGIC, [1, 2]), IDX_IMAGES_MAGIC)


def test_parse_idx_short_payload():
    with pytest.raises(FormatError):
        parse_idx(idx_bytes(IDX_LABELS_MAGIC, [1, 2, 3])[:-1], IDX_LABELS_MAGIC)


def test_load_idx_directory(idx_dir):
    directory, images, labels = idx_dir
    data = load_dataset(str(directory))
    assert data.x.shape == (6, 1, 4, 4)
    np.testing.assert_allclose(data.x[:, 0], images / 255.0)
    assert np.array_equal(data.y, labels)
    assert data.num_classes == 3


def test_load_idx_count_mismatch(tmp_path):
    images = tmp_path / "images"
    labels = tmp_path / "labels"
    images.write_bytes(idx_bytes(IDX_IMAGES_MAGIC, np.zeros((3, 2, 2))))
    labels.write_bytes(idx_bytes(IDX_LABELS_MAGIC, [0, 1]))
    with pytest.raises(FormatError):
        load_idx(images, labels)
    with pytest.raises(FormatError):
        load_dataset(f"{images},{labels}")


def test_load_dataset_unknown_source():
    with pytest.raises(DatasetError):
        load_dataset("cifar-1000")


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_idx(tmp_path / "images", tmp_path / "labels")


# Tests for the train/eval split
def test_split_is_seeded_partition():
    data = synthetic_rank2(seed=0, samples=50)
    train, held_out = split(data, seed=4)
    assert len(train) == 40
    assert len(held_out) == 10
    again, _ = split(data, seed=4)
    assert np.array_equal(train.x, again.x)
    rows = {row.tobytes() for row in np.concatenate([train.x, held_out.x])}
    assert len(rows) == 50


def test_split_needs_two_samples():
    with pytest.raises(DatasetError):
        split(Dataset(np.zeros((1, 2)), np.zeros(1), 2), seed=0)


def test_empty_bytes():
    with pytest.raises(FormatError):
        parse_idx(bytes(2), IDX_LABELS_MAGIC)
