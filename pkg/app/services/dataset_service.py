"""Datasets for the training driver.

Two builtin synthetic tasks (``synthetic-rank2``, ``two-gaussians``) and the
IDX image/label format. IDX data is given as a directory holding one
``*images*`` and one ``*labels*`` file (optionally gzip-compressed) or as an
explicit ``images_path,labels_path`` pair.
"""
from builtins import OSError, bytes, int, len, max, min, round, sorted, str
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union
import gzip
import logging
import struct
import numpy as np

from app.utils.exceptions import DatasetError, FormatError

logger = logging.getLogger(__name__)

BUILTIN_DATASETS = ("synthetic-rank2", "two-gaussians")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise DatasetError(f"{self.name}: {self.x.shape[0]} samples but {self.y.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def feature_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, indices: np.ndarray, suffix: str) -> "Dataset":
        return Dataset(self.x[indices], self.y[indices], self.num_classes, f"{self.name}:{suffix}")


def synthetic_rank2(seed: int, samples: int = 4096, features: int = 64, num_classes: int = 10) -> Dataset:
    """Labels from a planted rank-2 linear map: argmax(A B x), A is 10x2, B is 2x64."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((num_classes, 2))
    b = rng.standard_normal((2, features))
    x = rng.standard_normal((samples, features))
    logits = x @ b.T @ a.T
    return Dataset(x, np.argmax(logits, axis=1), num_classes, "synthetic-rank2")


def two_gaussians(seed: int, samples: int = 4096, features: int = 64, separation: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(features)
    direction /= np.linalg.norm(direction)
    y = rng.integers(0, 2, size=samples)
    x = rng.standard_normal((samples, features)) + np.outer(2 * y - 1, direction) * separation
    return Dataset(x, y, 2, "two-gaussians")


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as handle:
                return handle.read()
        return path.read_bytes()
    except OSError as e:
        logger.error(f"Could not read {path}: {e}")
        raise DatasetError(f"Cannot read {path}: {e}") from e


def parse_idx(data: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX array with big-endian dimensions."""
    if len(data) < 4:
        raise FormatError(f"{source}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{source}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{source}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != size:
        raise FormatError(f"{source}: {len(data) - header} payload bytes for dims {dims}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    # (N, H, W) becomes (N, 1, H, W); models with a (features,) input reshape on the way in.
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(x, y, max(num_classes, 2), images_path.stem)


def _find_idx_pair(directory: Path) -> Tuple[Path, Path]:
    files = sorted(p for p in directory.iterdir() if p.is_file())
    images = [p for p in files if "images" in p.name]
    labels = [p for p in files if "labels" in p.name]
    if len(images) != 1 or len(labels) != 1:
        raise DatasetError(f"{directory} must contain exactly one images file and one labels file")
    return images[0], labels[0]


def load_dataset(source: str, seed: int = 0) -> Dataset:
    if source == "synthetic-rank2":
        return synthetic_rank2(seed)
    if source == "two-gaussians":
        return two_gaussians(seed)
    if "," in source:
        images, labels = source.split(",", 1)
        return load_idx(images, labels)
    path = Path(source)
    if path.is_dir():
        return load_idx(*_find_idx_pair(path))
    raise DatasetError(f"Unknown dataset '{source}', expected one of {BUILTIN_DATASETS} or an IDX directory")


def split(dataset: Dataset, seed: int, train_fraction: float = 0.8) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle into train and evaluation parts."""
    if len(dataset) < 2:
        raise DatasetError(f"{dataset.name} needs at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = min(max(1, int(round(train_fraction * len(dataset)))), len(dataset) - 1)
    return dataset.subset(order[:cut], "train"), dataset.subset(order[cut:], "eval")
