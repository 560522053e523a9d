#!/usr/bin/env python3
"""
Datasets for PBLS
IDX (MNIST layout) reader and writer, a seeded Gaussian-blob generator,
min-max normalization and one-hot encoding.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from matrix_core import DimensionError, InvalidArgumentError, dense_matrix

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IDX_UBYTE = 0x08
GZIP_MAGIC = b'\x1f\x8b'

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Raised when an IDX file cannot be parsed"""

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


@dataclass(frozen=True)
class RawDataset:
    """Images (count x height x width, uint8) and their labels"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 3:
            raise FormatError('dimension-mismatch', f"images must be 3-D, got {self.images.ndim}-D")
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError('dimension-mismatch',
                              f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise FormatError('label-range',
                              f"label {int(self.labels.max())} with {self.num_classes} classes declared")

    @property
    def count(self) -> int:
        return int(self.images.shape[0])


@dataclass(frozen=True)
class Dataset:
    """Normalized features X, one-hot targets Y and the integer labels"""
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or self.labels.shape[0] != self.x.shape[0]:
            raise DimensionError(f"X has {self.x.shape[0]} rows, Y {self.y.shape[0]}, labels {self.labels.shape[0]}")
        if not np.all(self.y.sum(axis=1) == 1) or not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidArgumentError("every row of Y must be one-hot")

    @property
    def n_samples(self) -> int:
        return int(self.x.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.y.shape[1])


@dataclass(frozen=True)
class Normalization:
    """Per-feature min-max scaling to [0, 1]; constant features map to 0"""
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> 'Normalization':
        x = np.asarray(x, dtype=np.float64)
        return cls(minimum=x.min(axis=0), maximum=x.max(axis=0))

    @classmethod
    def fixed(cls, dim: int, low: float = 0.0, high: float = 255.0) -> 'Normalization':
        return cls(minimum=np.full(dim, low), maximum=np.full(dim, high))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Scale with the fitted range; values outside it are clipped"""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.minimum.shape[0]:
            raise DimensionError(f"Normalization fitted on {self.minimum.shape[0]} features, got {x.shape[1]}")
        span = self.maximum - self.minimum
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (x - self.minimum) / safe, 0.0)
        return np.clip(out, 0.0, 1.0)


def _open(path: PathLike):
    path = Path(path)
    with open(path, 'rb') as f:
        head = f.read(2)
    return gzip.open(path, 'rb') if head == GZIP_MAGIC else open(path, 'rb')


def _read_idx(path: PathLike, magic: int) -> Tuple[Tuple[int, ...], bytes]:
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError('truncated', f"{path}: file shorter than the IDX magic")
    (found,) = struct.unpack_from('>I', data)
    if found != magic:
        raise FormatError('bad-magic', f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")

    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise FormatError('truncated', f"{path}: header needs {header_len} bytes, got {len(data)}")
    dims = struct.unpack_from(f'>{ndim}I', data, 4)
    expected = header_len + int(np.prod(dims))
    if len(data) < expected:
        raise FormatError('truncated', f"{path}: body needs {expected - header_len} bytes, got {len(data) - header_len}")
    if len(data) > expected:
        raise FormatError('dimension-mismatch', f"{path}: {len(data) - expected} bytes beyond the declared dimensions")
    return dims, data[header_len:]


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10,
             limit: Optional[int] = None) -> RawDataset:
    """
    Read an IDX image tensor and its label vector (plain or gzip-compressed)

    Args:
        images_path: File with magic 0x00000803 (count x rows x cols, unsigned bytes)
        labels_path: File with magic 0x00000801 (count, unsigned bytes)
        num_classes: Labels must be below this
        limit: Keep only the first `limit` samples

    Raises:
        FormatError: with reason bad-magic, truncated, label-range or dimension-mismatch
    """
    dims, body = _read_idx(images_path, IMAGES_MAGIC)
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims)
    (count,), body = _read_idx(labels_path, LABELS_MAGIC)
    labels = np.frombuffer(body, dtype=np.uint8)
    if count != dims[0]:
        raise FormatError('dimension-mismatch', f"{dims[0]} images but {count} labels")

    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    raw = RawDataset(images=images, labels=labels, num_classes=num_classes)
    logger.info(f"Loaded {raw.count} images of {dims[1]}x{dims[2]} from {images_path}")
    return raw


def write_idx(path: PathLike, array: np.ndarray) -> None:
    """Write an unsigned-byte array as IDX; '.gz' paths are compressed"""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InvalidArgumentError(f"IDX writer only handles uint8, got {array.dtype}")
    header = struct.pack('>I', (IDX_UBYTE << 8) | array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'wb') as f:
        f.write(payload)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidArgumentError(f"labels must lie in 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def flatten(raw: RawDataset) -> np.ndarray:
    return raw.images.reshape(raw.count, -1).astype(np.float64)


def to_dataset(raw: RawDataset, normalization: Optional[Normalization] = None) -> Dataset:
    """Flatten, min-max scale (fitting on `raw` when no normalization is given) and one-hot"""
    x = flatten(raw)
    normalization = normalization or Normalization.fit(x)
    return Dataset(x=dense_matrix(normalization.apply(x)), y=dense_matrix(one_hot(raw.labels, raw.num_classes)),
                   labels=np.asarray(raw.labels, dtype=np.int64))


def synthetic_blobs(classes: int, samples_per_class: int, dim: int,
                    separation: float, seed: int) -> Dataset:
    """
    Gaussian blobs with unit within-class spread

    Centers are drawn at random, then rescaled so that the closest pair sits exactly
    `separation` apart. Features are min-max normalized over the whole sample.
    """
    if classes < 1 or samples_per_class < 1 or dim < 1:
        raise InvalidArgumentError("classes, samples_per_class and dim must all be >= 1")
    if separation < 0:
        raise InvalidArgumentError(f"separation must be >= 0, got {separation}")

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    if classes > 1:
        closest = float(pdist(centers).min())
        centers *= separation / closest if closest > 0 else 0.0

    labels = np.repeat(np.arange(classes), samples_per_class)
    x = centers[labels] + rng.standard_normal((labels.shape[0], dim))
    order = rng.permutation(labels.shape[0])
    x, labels = x[order], labels[order]

    normalized = Normalization.fit(x).apply(x)
    logger.debug(f"Generated {labels.shape[0]} blob samples: {classes} classes, dim {dim}, separation {separation}")
    return Dataset(x=dense_matrix(normalized), y=dense_matrix(one_hot(labels, classes)), labels=labels)


def train_test_split(dataset: Dataset, test_fraction: float = 0.5, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Shuffle rows with `seed` and cut off the last `test_fraction` as the test set"""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgumentError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = dataset.n_samples
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise InvalidArgumentError(f"cannot split {n} samples with test_fraction {test_fraction}")

    order = np.random.default_rng(seed).permutation(n)

    def _take(idx):
        return Dataset(x=dense_matrix(dataset.x[idx]), y=dense_matrix(dataset.y[idx]),
                       labels=dataset.labels[idx])

    return _take(order[:n - n_test]), _take(order[n - n_test:])
