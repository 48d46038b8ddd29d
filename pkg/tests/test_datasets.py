from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from pcn import datasets
from pcn.datasets import DatasetError, Split


def write_idx(root, n=6, rows=28, cols=28, seed=0, image_magic=2051, gz=False):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labs = rng.integers(0, 10, size=n, dtype=np.uint8)
    for split, (img_name, lab_name) in datasets.MNIST_FILES.items():
        img = struct.pack(">iiii", image_magic, n, rows, cols) + imgs.tobytes()
        lab = struct.pack(">ii", 2049, n) + labs.tobytes()
        for name, raw in ((img_name, img), (lab_name, lab)):
            if gz:
                with gzip.open(root / (name + ".gz"), "wb") as fh:
                    fh.write(raw)
            else:
                (root / name).write_bytes(raw)
    return imgs, labs


def write_cifar(path, n, label_bytes, seed=0, classes=10):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=(n, label_bytes), dtype=np.uint8)
    pix = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels, pix], axis=1).tobytes())
    return labels[:, -1], pix.reshape(n, 3, 32, 32)


class TestMnist:
    def test_reads_synthetic_idx(self, tmp_path):
        imgs, labs = write_idx(tmp_path)
        train, test = datasets.load_mnist(tmp_path)
        assert train.images.shape == (6, 1, 28, 28) and train.images.dtype == np.float32
        np.testing.assert_allclose(train.images[:, 0] * 255, imgs, atol=1e-4)
        np.testing.assert_array_equal(test.labels, labs)
        assert train.num_classes == 10

    def test_gzip_and_subdirectory(self, tmp_path):
        (tmp_path / "mnist").mkdir()
        write_idx(tmp_path / "mnist", gz=True)
        train, _ = datasets.load_mnist(tmp_path)
        assert len(train) == 6

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path, image_magic=2049)
        with pytest.raises(DatasetError, match="magic"):
            datasets.load_mnist(tmp_path)

    def test_truncated(self, tmp_path):
        write_idx(tmp_path)
        f = tmp_path / "train-images-idx3-ubyte"
        f.write_bytes(f.read_bytes()[:-10])
        with pytest.raises(DatasetError):
            datasets.load_mnist(tmp_path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DatasetError, match="train-images"):
            datasets.load_mnist(tmp_path)

    def test_env_fallback(self, tmp_path, monkeypatch):
        write_idx(tmp_path)
        monkeypatch.setenv(datasets.DATA_DIR_ENV, str(tmp_path))
        assert len(datasets.load("mnist")[0]) == 6
        monkeypatch.delenv(datasets.DATA_DIR_ENV)
        with pytest.raises(DatasetError):
            datasets.resolve_data_dir(None)

    def test_real_mnist(self, mnist):
        train, test = mnist
        assert train.images.shape == (60000, 1, 28, 28)
        assert test.images.shape == (10000, 1, 28, 28)
        assert np.bincount(train.labels)[0] == 5923
        assert 0.0 <= train.images.min() and train.images.max() <= 1.0


class TestCifar:
    def test_cifar10_layout(self, tmp_path):
        expect = {}
        for i, name in enumerate(datasets.CIFAR10_TRAIN + datasets.CIFAR10_TEST):
            expect[name] = write_cifar(tmp_path / name, 2, 1, seed=i)
        split = datasets._read_cifar([tmp_path / "data_batch_1.bin"], 1, 10)
        labels, pix = expect["data_batch_1.bin"]
        np.testing.assert_array_equal(split.labels, labels)
        np.testing.assert_allclose(split.images * 255, pix, atol=1e-3)

    def test_cifar10_requires_full_size(self, tmp_path):
        for name in datasets.CIFAR10_TRAIN + datasets.CIFAR10_TEST:
            write_cifar(tmp_path / name, 2, 1)
        with pytest.raises(DatasetError, match="50000"):
            datasets.load_cifar10(tmp_path)

    def test_cifar100_fine_label(self, tmp_path):
        labels, _ = write_cifar(tmp_path / "train.bin", 3, 2, classes=100)
        split = datasets._read_cifar([tmp_path / "train.bin"], 2, 100)
        np.testing.assert_array_equal(split.labels, labels)

    def test_partial_record(self, tmp_path):
        write_cifar(tmp_path / "test_batch.bin", 2, 1)
        f = tmp_path / "test_batch.bin"
        f.write_bytes(f.read_bytes()[:-5])
        with pytest.raises(DatasetError, match="multiple"):
            datasets._read_cifar([f], 1, 10)

    def test_unknown_dataset(self):
        with pytest.raises(ValueError):
            datasets.load("svhn")


class TestNormalization:
    def test_zero_mean_unit_std(self, rng):
        split = Split(rng.uniform(0, 1, (20, 3, 4, 4)).astype(np.float32), np.zeros(20, int), 10)
        stats = datasets.compute_norm_stats(split)
        z = datasets.normalize(split.images, stats)
        np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-4)
        np.testing.assert_allclose(datasets.denormalize(z, stats), split.images, atol=1e-5)

    def test_constant_channel_rejected(self):
        split = Split(np.ones((4, 1, 2, 2), np.float32), np.zeros(4, int), 10)
        with pytest.raises(ValueError):
            datasets.compute_norm_stats(split)

    def test_stats_round_trip(self):
        s = datasets.NormStats((0.1, 0.2), (0.3, 0.4))
        assert datasets.NormStats.from_dict(s.to_dict()) == s


class TestAugment:
    def test_centre_crop_no_flip_is_identity(self, rng):
        img = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(datasets.augment(img, rng, offset=(4, 4), flip=False), img)

    def test_corner_offset_pads_with_zeros(self, rng):
        img = np.ones((1, 3, 32, 32), np.float32)
        out = datasets.augment(img, rng, offset=(0, 0), flip=False)
        assert np.all(out[..., :4, :] == 0) and np.all(out[..., 4:, 4:] == 1)

    def test_flip(self, rng):
        img = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(datasets.augment(img, rng, offset=(4, 4), flip=True),
                                      img[..., ::-1])

    def test_rejects_mnist_size(self, rng):
        with pytest.raises(ValueError):
            datasets.augment(np.zeros((1, 1, 28, 28)), rng)

    def test_batch_shape_and_determinism(self):
        x = np.random.default_rng(0).standard_normal((5, 3, 32, 32)).astype(np.float32)
        a = datasets.augment_batch(x, np.random.default_rng(1))
        b = datasets.augment_batch(x, np.random.default_rng(1))
        assert a.shape == x.shape
        np.testing.assert_array_equal(a, b)


class TestBatching:
    def test_covers_every_item_once(self):
        split = Split(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10), 10)
        seen = np.concatenate([y for _, y in datasets.batches(split, 4, shuffle_seed=3)])
        assert sorted(seen.tolist()) == list(range(10))
        sizes = [len(y) for _, y in datasets.batches(split, 4)]
        assert sizes == [4, 4, 2]

    def test_shuffle_depends_on_seed(self):
        split = Split(np.zeros((50, 1, 1, 1), np.float32), np.arange(50), 10)
        a = next(datasets.batches(split, 50, 1))[1]
        b = next(datasets.batches(split, 50, 2))[1]
        assert not np.array_equal(a, b)

    def test_subset_takes_prefix(self):
        split = Split(np.zeros((5, 1, 1, 1), np.float32), np.arange(5), 10)
        np.testing.assert_array_equal(split.subset(3).labels, [0, 1, 2])
        with pytest.raises(ValueError):
            split.subset(6)

    def test_getitem(self):
        split = Split(np.zeros((2, 1, 2, 2), np.float32), np.array([4, 7]), 10)
        item = split[1]
        assert item.label == 7 and item.pixels.shape == (1, 1, 2, 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Split(np.zeros((2, 1, 1, 1)), np.zeros(3), 10)
