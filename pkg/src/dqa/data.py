"""Dataset generation and ingestion.

Synthetic desk-scale benchmarks (two moons, blobs, concentric rings) plus
loaders for IDX image files and labeled numeric CSVs. Loaders are pure;
generation is deterministic under a seed. Normalization statistics are
always computed on the train split and carried along so the provenance
can be asserted.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_KINDS = ("two_moons", "blobs", "xor_rings")


class FormatError(ValueError):
    """A data file does not match its documented format."""


@dataclass
class NormStats:
    mean: np.ndarray
    sd: np.ndarray
    source_split: str = "train"


@dataclass
class Dataset:
    features: np.ndarray        # (N, D) or (N, C, H, W)
    labels: np.ndarray          # (N,) integer class indices
    split: str = "train"
    stats: NormStats | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"features {self.features.shape} vs labels {self.labels.shape}")
        if self.n and self.labels.min() < 0:
            raise ValidationError("labels must be non-negative class indices")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.n else 0

    @property
    def feature_dim(self):
        return int(np.prod(self.features.shape[1:]))


def _two_moons(rng, n, noise):
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    pts = np.vstack([upper, lower])
    pts += rng.normal(0.0, 1.0, pts.shape) * noise
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return pts, labels


def _blobs(rng, n, noise):
    n0 = n // 2
    n1 = n - n0
    centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
    pts = np.vstack([
        centers[0] + rng.normal(0.0, 1.0, (n0, 2)) * noise,
        centers[1] + rng.normal(0.0, 1.0, (n1, 2)) * noise,
    ])
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return pts, labels


def _xor_rings(rng, n, noise):
    # two concentric annuli, class = ring index
    n0 = n // 2
    n1 = n - n0
    radii = np.concatenate([np.full(n0, 1.0), np.full(n1, 2.0)])
    radii = radii + rng.normal(0.0, 1.0, n) * noise
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.stack([radii * np.cos(theta), radii * np.sin(theta)], axis=1)
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return pts, labels


_GENERATORS = {"two_moons": _two_moons, "blobs": _blobs, "xor_rings": _xor_rings}


def compute_stats(features: np.ndarray, split="train") -> NormStats:
    flat = features.reshape(features.shape[0], -1)
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return NormStats(mean=mean, sd=sd, source_split=split)


def apply_stats(dataset: Dataset, stats: NormStats) -> Dataset:
    flat = dataset.features.reshape(dataset.n, -1)
    normed = ((flat - stats.mean) / stats.sd).reshape(dataset.features.shape)
    return Dataset(normed, dataset.labels, split=dataset.split, stats=stats)


def normalize_pair(train: Dataset, val: Dataset) -> tuple[Dataset, Dataset]:
    """Standardize both splits with train-split statistics only."""
    stats = compute_stats(train.features, split="train")
    return apply_stats(train, stats), apply_stats(val, stats)


def split_train_val(features, labels, seed, fraction=0.8):
    """Deterministic permutation split (train fraction first)."""
    n = features.shape[0]
    perm = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,))).permutation(n)
    cut = int(round(fraction * n))
    train = Dataset(features[perm[:cut]], labels[perm[:cut]], split="train")
    val = Dataset(features[perm[cut:]], labels[perm[cut:]], split="val")
    return train, val


def gen_synthetic(kind: str, n: int, noise: float, seed: int) -> tuple[Dataset, Dataset]:
    """Balanced 2-class synthetic dataset, 80/20 split, standardized.

    Deterministic under the seed: the same call returns bit-identical
    arrays.
    """
    if kind not in _GENERATORS:
        raise ValidationError(f"unknown synthetic dataset {kind!r} "
                              f"(choose from {', '.join(SYNTHETIC_KINDS)})")
    if n < 4:
        raise ValidationError(f"need n >= 4, got {n}")
    if noise < 0:
        raise ValidationError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    features, labels = _GENERATORS[kind](rng, n, noise)
    train, val = split_train_val(features, labels, seed)
    return normalize_pair(train, val)


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: {what} truncated (wanted {count} bytes, got {len(data)})")
    return data


def load_idx(images_path, labels_path, split="train") -> Dataset:
    """Load an IDX image/label file pair (big-endian, pixel bytes -> [0, 1])."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: image magic 0x{magic:08x}, "
                              f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = _read_exact(fh, count * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: label magic 0x{magic:08x}, "
                              f"expected 0x{IDX_LABELS_MAGIC:08x}")
        if label_count != count:
            raise FormatError(f"label count {label_count} does not match image count {count}")
        raw_labels = _read_exact(fh, label_count, labels_path, "label data")
    features = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(count, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(features, labels, split=split)


def load_csv(path, label_column: str, split="train") -> Dataset:
    """Load a rectangular numeric CSV with a header row.

    Features are the non-label columns in header order; labels must parse
    as integers.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise ValidationError(f"{path}: no column named {label_column!r} in header")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        features, labels = [], []
        for row_number, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: row {row_number} has {len(row)} cells, "
                                  f"expected {len(header)}")
            try:
                features.append([float(row[i]) for i in feature_idx])
                labels.append(int(row[label_idx]))
            except ValueError:
                raise FormatError(f"{path}: row {row_number} has a non-numeric cell") from None
    if not features:
        raise FormatError(f"{path}: no data rows")
    return Dataset(np.array(features), np.array(labels, dtype=np.int64), split=split)


def save_csv(dataset: Dataset, path, label_column="label"):
    """Write a dataset as CSV; floats round-trip exactly through repr."""
    flat = dataset.features.reshape(dataset.n, -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(flat.shape[1])] + [label_column])
        for row, label in zip(flat, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
