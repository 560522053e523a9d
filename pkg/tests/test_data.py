import gzip
import struct

import numpy as np
import pytest

from data import (
    FormatError,
    Normalization,
    RawDataset,
    load_idx,
    one_hot,
    synthetic_blobs,
    to_dataset,
    train_test_split,
    write_idx,
)
from matrix_core import InvalidArgumentError


def idx_images(images):
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack('>IIII', 0x803, *images.shape) + images.tobytes()


def idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack('>II', 0x801, labels.shape[0]) + labels.tobytes()


@pytest.fixture
def fixture_files(tmp_path):
    """Two 2x2 images labelled 3 and 7"""
    images = tmp_path / 'images.idx'
    labels = tmp_path / 'labels.idx'
    images.write_bytes(idx_images([[[0, 255], [10, 20]], [[1, 2], [3, 4]]]))
    labels.write_bytes(idx_labels([3, 7]))
    return images, labels


def reason(excinfo):
    return excinfo.value.reason


class TestLoadIdx:
    def test_handcrafted_fixture(self, fixture_files):
        raw = load_idx(*fixture_files)
        assert raw.count == 2
        assert raw.images.shape == (2, 2, 2)
        assert raw.labels.tolist() == [3, 7]
        assert raw.images[0, 0, 1] == 255

    def test_gzip_is_detected(self, fixture_files, tmp_path):
        images, labels = fixture_files
        packed = tmp_path / 'images.idx.gz'
        packed.write_bytes(gzip.compress(images.read_bytes()))
        assert load_idx(packed, labels).count == 2

    def test_write_and_load(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, size=5, dtype=np.uint8)
        write_idx(tmp_path / 'i.gz', images)
        write_idx(tmp_path / 'l', labels)
        raw = load_idx(tmp_path / 'i.gz', tmp_path / 'l')
        assert np.array_equal(raw.images, images)
        assert np.array_equal(raw.labels, labels)

    def test_limit(self, fixture_files):
        assert load_idx(*fixture_files, limit=1).labels.tolist() == [3]

    def test_truncated(self, fixture_files):
        images, labels = fixture_files
        images.write_bytes(images.read_bytes()[:-1])
        with pytest.raises(FormatError) as excinfo:
            load_idx(images, labels)
        assert reason(excinfo) == 'truncated'

    def test_truncated_header(self, fixture_files):
        images, labels = fixture_files
        images.write_bytes(images.read_bytes()[:6])
        with pytest.raises(FormatError) as excinfo:
            load_idx(images, labels)
        assert reason(excinfo) == 'truncated'

    def test_bad_magic(self, fixture_files):
        images, labels = fixture_files
        with pytest.raises(FormatError) as excinfo:
            load_idx(labels, images)
        assert reason(excinfo) == 'bad-magic'

    def test_label_out_of_range(self, fixture_files):
        images, labels = fixture_files
        labels.write_bytes(idx_labels([3, 255]))
        with pytest.raises(FormatError) as excinfo:
            load_idx(images, labels, num_classes=10)
        assert reason(excinfo) == 'label-range'

    def test_count_mismatch(self, fixture_files):
        images, labels = fixture_files
        labels.write_bytes(idx_labels([3, 7, 1]))
        with pytest.raises(FormatError) as excinfo:
            load_idx(images, labels)
        assert reason(excinfo) == 'dimension-mismatch'

    def test_trailing_bytes(self, fixture_files):
        images, labels = fixture_files
        images.write_bytes(images.read_bytes() + b'\x00')
        with pytest.raises(FormatError) as excinfo:
            load_idx(images, labels)
        assert reason(excinfo) == 'dimension-mismatch'

    def test_writer_needs_bytes(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            write_idx(tmp_path / 'x', np.zeros((2, 2), dtype=np.float32))


class TestToDataset:
    def test_zero_image_is_zero_row(self):
        raw = RawDataset(images=np.zeros((1, 2, 2), dtype=np.uint8), labels=np.array([0], dtype=np.uint8))
        ds = to_dataset(raw, Normalization.fixed(4))
        assert not np.any(ds.x)

    def test_full_pixel_is_one(self):
        raw = RawDataset(images=np.full((1, 1, 2), 255, dtype=np.uint8), labels=np.array([0], dtype=np.uint8))
        assert np.array_equal(to_dataset(raw, Normalization.fixed(2)).x, [[1.0, 1.0]])

    def test_one_hot(self):
        assert one_hot([3], 10).tolist() == [[0, 0, 0, 1, 0, 0, 0, 0, 0, 0]]
        with pytest.raises(InvalidArgumentError):
            one_hot([10], 10)

    def test_constant_feature_scales_to_zero(self, fixture_files):
        images, labels = fixture_files
        images.write_bytes(idx_images([[[5, 0]], [[5, 200]]]))
        ds = to_dataset(load_idx(images, labels))
        assert ds.x[:, 0].tolist() == [0.0, 0.0]
        assert ds.x[:, 1].tolist() == [0.0, 1.0]

    def test_ranges_and_shapes(self, fixture_files):
        ds = to_dataset(load_idx(*fixture_files))
        assert (ds.n_samples, ds.input_dim, ds.n_classes) == (2, 4, 10)
        assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0
        assert np.all(ds.y.sum(axis=1) == 1)

    def test_reused_normalization_clips(self):
        norm = Normalization.fit(np.array([[0.0], [10.0]]))
        assert norm.apply(np.array([[-5.0], [5.0], [20.0]])).ravel().tolist() == [0.0, 0.5, 1.0]


def nearest_centroid_accuracy(train, test):
    centroids = np.stack([train.x[train.labels == c].mean(axis=0) for c in range(train.n_classes)])
    distances = ((test.x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == test.labels))


class TestSyntheticBlobs:
    def test_same_seed_same_data(self):
        first = synthetic_blobs(3, 20, 5, 4.0, seed=1)
        second = synthetic_blobs(3, 20, 5, 4.0, seed=1)
        assert np.array_equal(first.x, second.x)
        assert np.array_equal(first.labels, second.labels)

    def test_shapes(self):
        ds = synthetic_blobs(4, 25, 6, 3.0, seed=2)
        assert (ds.n_samples, ds.input_dim, ds.n_classes) == (100, 6, 4)
        assert np.bincount(ds.labels).tolist() == [25] * 4
        assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0

    def test_well_separated_classes(self):
        dataset = synthetic_blobs(2, 200, 2, 10.0, seed=5)
        train, test = train_test_split(dataset, 0.5, seed=5)
        assert nearest_centroid_accuracy(train, test) == 1.0

    def test_no_separation_is_chance(self):
        dataset = synthetic_blobs(2, 500, 2, 0.0, seed=6)
        train, test = train_test_split(dataset, 0.5, seed=6)
        assert 0.35 <= nearest_centroid_accuracy(train, test) <= 0.65

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            synthetic_blobs(0, 10, 2, 1.0, seed=0)
        with pytest.raises(InvalidArgumentError):
            synthetic_blobs(2, 10, 2, -1.0, seed=0)


class TestSplit:
    def test_partition(self):
        ds = synthetic_blobs(2, 50, 3, 4.0, seed=1)
        train, test = train_test_split(ds, 0.3, seed=4)
        assert (train.n_samples, test.n_samples) == (70, 30)
        rows = {tuple(r) for r in ds.x.tolist()}
        assert {tuple(r) for r in train.x.tolist()} | {tuple(r) for r in test.x.tolist()} == rows

    def test_bad_fraction(self):
        ds = synthetic_blobs(2, 5, 3, 4.0, seed=1)
        with pytest.raises(InvalidArgumentError):
            train_test_split(ds, 1.0)
