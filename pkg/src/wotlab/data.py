"""Dataset loaders (IDX, CIFAR-10 binary, synthetic blobs) and holdout splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray  # (N, *shape) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataFormatError(f"labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixels outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, name or self.name)

    def save(self, path):
        np.savez(path, images=self.images, labels=self.labels,
                 classes=np.int64(self.classes), name=np.str_(self.name))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["images"], z["labels"], int(z["classes"]), str(z["name"]))


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def _parse_idx(raw, expect_magic, path):
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != count:
        raise DataFormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, classes=10, name="idx"):
    """Big-endian IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(imgs) != len(labels):
        raise DataFormatError(f"{len(imgs)} images but {len(labels)} labels")
    if labels.size and labels.max() >= classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {classes})")
    x = (imgs.astype(np.float32) / 255.0)[:, None]  # add a channel axis
    return Dataset(x, labels.astype(np.int64), classes, name)


def write_idx(images_u8, labels_u8, images_path, labels_path):
    """Write uint8 arrays as an IDX pair (used for fixtures and conversions)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", 0x800 | images_u8.ndim))
        fh.write(struct.pack(f">{images_u8.ndim}I", *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)))
        fh.write(labels_u8.tobytes())


def load_cifar_binary(paths, name="cifar10"):
    """CIFAR-10 binary batches: 1 label byte + 3072 channel-planar pixel bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() >= 10:
            raise DataFormatError(f"{p}: label byte {rec[:, 0].max()} >= 10")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    if not xs:
        raise DataFormatError("no CIFAR files given")
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10, name)


def synth_blobs(seed, n_per_class, classes, dim, spread):
    """Gaussian clusters around fixed, seed-independent centers, clipped to [0, 1].

    ``dim`` is a feature count or an image shape tuple.
    """
    if classes < 2:
        raise ConfigError(f"synth_blobs needs at least 2 classes, got {classes}")
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    d = int(np.prod(shape))
    centers = np.random.Generator(np.random.Philox(key=0xB10B)).uniform(0.2, 0.8, (classes, d))
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), d))
    perm = rng.permutation(len(labels))
    x = np.clip(x[perm], 0.0, 1.0).astype(np.float32).reshape((len(labels),) + shape)
    return Dataset(x, labels[perm], classes, f"blobs{classes}x{n_per_class}")


@dataclass
class SplitSpec:
    holdout_size: int = 500
    seed: int = 0
    source: str = "unseen"


def holdout_split(dataset, spec):
    """Seeded split into (train, holdout); ``seen`` draws the holdout from inside train."""
    n = len(dataset)
    if spec.holdout_size >= n or spec.holdout_size < 0:
        raise ConfigError(f"holdout_size {spec.holdout_size} must be in [0, {n})")
    if spec.source not in ("unseen", "seen"):
        raise ConfigError(f"split source must be 'unseen' or 'seen', got {spec.source!r}")
    train_idx, hold_idx = split_indices(n, spec)
    return (dataset.subset(train_idx, dataset.name + ":train"),
            dataset.subset(hold_idx, dataset.name + ":holdout"))


def split_indices(n, spec):
    """Index form of :func:`holdout_split` (train_idx, holdout_idx)."""
    perm = np.random.Generator(np.random.Philox(key=int(spec.seed))).permutation(n)
    h = spec.holdout_size
    if spec.source == "unseen":
        return np.sort(perm[h:]), np.sort(perm[:h])
    return np.arange(n), np.sort(perm[:h])
