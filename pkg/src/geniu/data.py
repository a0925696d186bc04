"""Dataset ingestion, imbalance construction, and seeded batching.

Two sources feed the same Dataset type: IDX image/label file pairs
(big-endian, magic 0x803 / 0x801) and synthetic Gaussian blob images
for fast desk-scale runs. Class imbalance is induced by subsampling
minority classes at a keep rate; majority classes always keep every
sample. Every stage is a pure function of (input, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, ConfigError, CountMismatch, TruncatedFile
from .seeding import component_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [n, channels, height, width], float32 in [0, 1]
    labels: np.ndarray  # [n], int64 class indices in {0..K-1}
    split: str  # "train" or "test"
    class_counts: np.ndarray = field(default=None)  # [K], sums to n

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(self.images.shape[0], self.labels.shape[0])
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.class_counts is None:
            k = int(self.labels.max()) + 1 if self.labels.size else 0
            self.class_counts = np.bincount(self.labels, minlength=k)
        self.class_counts = np.asarray(self.class_counts)
        if self.labels.size and int(self.labels.max()) >= len(self.class_counts):
            raise ConfigError("label index out of range for class_counts")
        if int(self.class_counts.sum()) != self.n:
            raise ConfigError("class_counts must sum to the number of samples")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)


@dataclass
class ImbalanceSpec:
    """Keep rates for minority classes; majority classes implicitly keep all."""

    majority: frozenset
    rate: object  # scalar in (0, 1] or per-class vector of keep rates

    def rates_for(self, num_classes: int) -> np.ndarray:
        r = np.asarray(self.rate, dtype=np.float64)
        if r.ndim == 0:
            rates = np.full(num_classes, float(r))
        elif r.shape == (num_classes,):
            rates = r.copy()
        else:
            raise ConfigError(
                f"rate vector length {r.shape} does not match {num_classes} classes"
            )
        for k in self.majority:
            if not 0 <= k < num_classes:
                raise ConfigError(f"majority class {k} out of range")
            rates[k] = 1.0
        bad = [k for k in range(num_classes) if not 0.0 < rates[k] <= 1.0]
        if bad:
            raise ConfigError(f"keep rates must lie in (0, 1]; offending classes {bad}")
        return rates


def _read_exact(raw: bytes, path, expected: int) -> None:
    if len(raw) < expected:
        raise TruncatedFile(path, expected, len(raw))


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair into a train Dataset.

    Pixels are scaled by 1/255 into [0, 1]; no mean-centering anywhere.
    """
    with open(images_path, "rb") as fh:
        raw = fh.read()
    _read_exact(raw, images_path, 16)
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IMAGES_MAGIC:
        raise BadMagic(images_path, IMAGES_MAGIC, magic)
    _read_exact(raw, images_path, 16 + n * rows * cols)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0

    with open(labels_path, "rb") as fh:
        raw = fh.read()
    _read_exact(raw, labels_path, 8)
    magic, n_labels = struct.unpack_from(">II", raw, 0)
    if magic != LABELS_MAGIC:
        raise BadMagic(labels_path, LABELS_MAGIC, magic)
    _read_exact(raw, labels_path, 8 + n_labels)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)

    if n != n_labels:
        raise CountMismatch(n, n_labels)
    return Dataset(images=images, labels=labels, split="train")


def _blob_geometry(dim: int):
    # Most-square h*w factorization; reject shapes that cannot form a 2-D image.
    h = int(np.sqrt(dim))
    while h >= 2 and dim % h:
        h -= 1
    if h < 2:
        raise ConfigError(f"dim={dim} does not factor into h*w with h, w >= 2")
    return h, dim // h


def synth_blobs(K, dim, n_per_class, separation, noise_std, seed):
    """Isotropic Gaussian clusters rendered as [n,1,h,w] images in [0,1].

    Class centers sit at 0.5 + (separation/2) * u_k for seeded unit vectors
    u_k, so separation controls inter-class margin in units of pixel range.
    Returns (train, test); the test split draws fresh samples from the same
    class distributions at one fifth the per-class count.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if dim < 2:
        raise ConfigError(f"need dim >= 2, got {dim}")
    h, w = _blob_geometry(dim)
    rng = component_rng(seed, "synth-blobs")
    directions = rng.normal(size=(K, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = 0.5 + (separation / 2.0) * directions

    def draw(count_per_class, split):
        xs, ys = [], []
        for k in range(K):
            pts = centers[k] + noise_std * rng.normal(size=(count_per_class, dim))
            xs.append(np.clip(pts, 0.0, 1.0))
            ys.append(np.full(count_per_class, k, dtype=np.int64))
        images = np.concatenate(xs).astype(np.float32).reshape(-1, 1, h, w)
        return Dataset(images=images, labels=np.concatenate(ys), split=split)

    train = draw(n_per_class, "train")
    test = draw(max(1, n_per_class // 5), "test")
    return train, test


def build_imbalanced(ds: Dataset, spec: ImbalanceSpec, seed) -> Dataset:
    """Subsample minority classes of a train split uniformly without replacement.

    Class k keeps floor(rate_k * count_k) samples; kept samples preserve
    their relative order. Pixels and labels are never altered, only
    membership.
    """
    if ds.split != "train":
        raise ConfigError("imbalance is only applied to train splits")
    rates = spec.rates_for(ds.num_classes)
    rng = component_rng(seed, "imbalance")
    keep = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if rates[k] >= 1.0:
            keep.append(idx)
            continue
        n_keep = int(np.floor(rates[k] * len(idx)))
        if n_keep == 0:
            raise ConfigError(
                f"rate {rates[k]} empties class {k} ({len(idx)} samples)"
            )
        chosen = rng.choice(idx, size=n_keep, replace=False)
        keep.append(np.sort(chosen))
    order = np.sort(np.concatenate(keep))
    return Dataset(
        images=ds.images[order],
        labels=ds.labels[order],
        split="train",
        class_counts=np.bincount(ds.labels[order], minlength=ds.num_classes),
    )


def batches(ds: Dataset, batch_size: int, shuffle_seed):
    """Yield (images, labels) over a seeded permutation; final short batch kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = component_rng(shuffle_seed, "batch-order")
    order = rng.permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        sel = order[start : start + batch_size]
        yield ds.images[sel], ds.labels[sel]


def remove_classes(ds: Dataset, classes) -> Dataset:
    """Drop every sample of the given classes; label indexing is unchanged."""
    drop = sorted(set(classes))
    if not drop:
        return ds
    mask = ~np.isin(ds.labels, drop)
    if not mask.any():
        raise ConfigError("removing these classes would empty the dataset")
    return Dataset(
        images=ds.images[mask],
        labels=ds.labels[mask],
        split=ds.split,
        class_counts=np.bincount(ds.labels[mask], minlength=ds.num_classes),
    )


def dataset_nbytes(ds: Dataset) -> int:
    return int(ds.images.nbytes + ds.labels.nbytes)
