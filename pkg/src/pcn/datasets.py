"""MNIST / CIFAR ingestion, per-channel normalization, augmentation, batching.

Files are read from a local directory (``--data-dir`` or ``PCN_DATA_DIR``);
nothing is downloaded.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

DATA_DIR_ENV = "PCN_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR_RECORDS_PER_BATCH = 10000


class DatasetError(OSError):
    """A dataset file is missing, truncated or malformed."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # 1 x C x H x W
    label: int


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # N int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i:i + 1], int(self.labels[i]))

    def subset(self, n: int | None) -> "Split":
        if n is None:
            return self
        if not 0 < n <= len(self):
            raise ValueError(f"subset size {n} outside 1..{len(self)}")
        return Split(self.images[:n], self.labels[:n], self.num_classes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def resolve_data_dir(path: str | os.PathLike | None = None) -> Path:
    if path is None:
        path = os.environ.get(DATA_DIR_ENV)
    if not path:
        raise DatasetError(f"no data directory given; pass --data-dir or set {DATA_DIR_ENV}")
    return Path(path)


def _read(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            if candidate.suffix == ".gz":
                with gzip.open(candidate, "rb") as fh:
                    return fh.read()
            return candidate.read_bytes()
    raise DatasetError(f"missing dataset file: {path}")


def read_idx_images(path: Path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic}, expected {IDX_IMAGE_MAGIC}")
    if len(raw) != 16 + n * rows * cols:
        raise DatasetError(f"{path}: expected {n}x{rows}x{cols} pixels, "
                           f"file holds {len(raw) - 16} bytes")
    return np.frombuffer(raw, np.uint8, offset=16).reshape(n, 1, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">ii", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic}, expected {IDX_LABEL_MAGIC}")
    if len(raw) != 8 + n:
        raise DatasetError(f"{path}: expected {n} labels, file holds {len(raw) - 8} bytes")
    return np.frombuffer(raw, np.uint8, offset=8).astype(np.int64)


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255)


def load_mnist(data_dir=None) -> tuple[Split, Split]:
    root = resolve_data_dir(data_dir)
    if (root / "mnist").is_dir():
        root = root / "mnist"
    out = []
    for split in ("train", "test"):
        img_name, lab_name = MNIST_FILES[split]
        images = read_idx_images(root / img_name)
        labels = read_idx_labels(root / lab_name)
        if len(images) != len(labels):
            raise DatasetError(f"{root / img_name}: {len(images)} images but "
                               f"{lab_name} has {len(labels)} labels")
        if labels.size and labels.max() >= 10:
            raise DatasetError(f"{root / lab_name}: label {labels.max()} out of range")
        out.append(Split(_to_unit(images), labels, 10))
    return out[0], out[1]


def _read_cifar(paths: list[Path], label_bytes: int, num_classes: int) -> Split:
    record = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % record:
            raise DatasetError(f"{path}: size {len(raw)} is not a multiple of record "
                               f"length {record}")
        recs = np.frombuffer(raw, np.uint8).reshape(-1, record)
        labels.append(recs[:, label_bytes - 1].astype(np.int64))  # fine label is last
        images.append(recs[:, label_bytes:].reshape(-1, 3, 32, 32))
    lab = np.concatenate(labels)
    if lab.size and lab.max() >= num_classes:
        raise DatasetError(f"label {lab.max()} out of range for {num_classes} classes")
    return Split(_to_unit(np.concatenate(images)), lab, num_classes)


def _cifar_root(root: Path, sub: str) -> Path:
    return root / sub if (root / sub).is_dir() else root


def load_cifar10(data_dir=None) -> tuple[Split, Split]:
    root = _cifar_root(resolve_data_dir(data_dir), "cifar-10-batches-bin")
    train = _read_cifar([root / f for f in CIFAR10_TRAIN], 1, 10)
    test = _read_cifar([root / f for f in CIFAR10_TEST], 1, 10)
    if len(train) != 50000 or len(test) != 10000:
        raise DatasetError(f"{root}: expected 50000/10000 records, got {len(train)}/{len(test)}")
    return train, test


def load_cifar100(data_dir=None) -> tuple[Split, Split]:
    root = _cifar_root(resolve_data_dir(data_dir), "cifar-100-binary")
    train = _read_cifar([root / "train.bin"], 2, 100)
    test = _read_cifar([root / "test.bin"], 2, 100)
    if len(train) != 50000 or len(test) != 10000:
        raise DatasetError(f"{root}: expected 50000/10000 records, got {len(train)}/{len(test)}")
    return train, test


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10, "cifar100": load_cifar100}


def load(dataset: str, data_dir=None) -> tuple[Split, Split]:
    if dataset not in LOADERS:
        raise ValueError(f"unknown dataset {dataset!r}; expected one of {sorted(LOADERS)}")
    return LOADERS[dataset](data_dir)


# ------------------------------------------------------------ normalization


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def arrays(self, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        m = np.asarray(self.mean, dtype=dtype)[None, :, None, None]
        s = np.asarray(self.std, dtype=dtype)[None, :, None, None]
        return m, s

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def compute_norm_stats(split: Split) -> NormStats:
    if len(split) == 0:
        raise ValueError("cannot compute normalization statistics of an empty split")
    x = split.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        raise ValueError(f"channel with zero standard deviation: std={std.tolist()}")
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def normalize(images: np.ndarray, stats: NormStats) -> np.ndarray:
    m, s = stats.arrays(np.float64)
    return ((images - m) / s).astype(np.float32)


def denormalize(images: np.ndarray, stats: NormStats) -> np.ndarray:
    m, s = stats.arrays(np.float64)
    return (images * s + m).astype(np.float32)


def normalize_split(split: Split, stats: NormStats) -> Split:
    return Split(normalize(split.images, stats), split.labels, split.num_classes)


# ------------------------------------------------------------- augmentation

PAD = 4


def augment(image: np.ndarray, rng: np.random.Generator, offset: tuple[int, int] | None = None,
            flip: bool | None = None) -> np.ndarray:
    """Zero-pad by 4, crop back to 32x32 at a random offset, maybe mirror.

    ``image`` is a normalized 1x3x32x32 array, so zero fill equals the
    channel mean.  ``offset``/``flip`` force the random choices.
    """
    if image.shape[-2:] != (32, 32):
        raise ValueError(f"augment expects 32x32 images, got {image.shape}")
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * PAD + 1, size=2))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(PAD, PAD), (PAD, PAD)])
    dy, dx = offset
    out = padded[..., dy:dy + 32, dx:dx + 32]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(images)
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(images, [(0, 0), (0, 0), (PAD, PAD), (PAD, PAD)])
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + 32, dx:dx + 32]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out


# ----------------------------------------------------------------- batching


def batches(split: Split, batch_size: int, shuffle_seed: int | None = None
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One pass over ``split``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split)
    order = (np.arange(n) if shuffle_seed is None
             else np.random.default_rng(shuffle_seed).permutation(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if shuffle_seed is None:
            yield split.images[start:start + batch_size], split.labels[start:start + batch_size]
        else:
            yield split.images[idx], split.labels[idx]
