"""Desk-scale feature datasets: synthesis, file I/O, class-disjoint splits, sampling.

Binary layout (little-endian)::

    b"THSGDATA"  u32 n  u32 dim  u32 C
    n*dim f32 features (row-major)
    n u32 labels

CSV layout: one sample per line, ``label,f1,...,fd``, no header.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataFormatError

DATA_MAGIC = b"THSGDATA"
_HEADER = struct.Struct("<8sIII")


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        present = np.bincount(self.labels, minlength=self.num_classes)
        if (present == 0).any():
            raise ContractError(f"classes {np.flatnonzero(present == 0).tolist()} have no samples")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_indices(self):
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]


def generate_gaussian_mixture(classes, per_class, dim, center_scale=1.0, noise_scale=0.3, seed=0):
    """Isotropic Gaussian blobs around centres on a sphere of radius ``center_scale``.

    Values are rounded to float32 so the dataset survives the binary format
    unchanged.
    """
    if classes < 2 or per_class < 2:
        raise ContractError("need at least 2 classes and 2 samples per class")
    if noise_scale < 0 or dim < 1:
        raise ContractError("noise_scale must be >= 0 and dim >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim))
    centers *= center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(scale=1.0, size=(classes * per_class, dim)) * noise_scale
    features = (centers[labels] + noise).astype(np.float32).astype(np.float64)
    return FeatureDataset(features, labels, classes)


def save_binary(ds, path):
    with open(path, "wb") as fh:
        fh.write(dump_binary(ds))


def dump_binary(ds):
    n, dim = ds.features.shape
    return b"".join(
        (
            _HEADER.pack(DATA_MAGIC, n, dim, ds.num_classes),
            ds.features.astype("<f4").tobytes(),
            ds.labels.astype("<u4").tobytes(),
        )
    )


def parse_binary(blob):
    if len(blob) < _HEADER.size:
        raise DataFormatError("file shorter than the header", offset=len(blob))
    magic, n, dim, C = _HEADER.unpack_from(blob, 0)
    if magic != DATA_MAGIC:
        raise DataFormatError("bad magic, expected THSGDATA", offset=0)
    feat_bytes = 4 * n * dim
    expected = _HEADER.size + feat_bytes + 4 * n
    if len(blob) != expected:
        raise DataFormatError(
            f"size {len(blob)} does not match header n={n} dim={dim} (expected {expected})",
            offset=min(len(blob), expected),
        )
    features = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=_HEADER.size).reshape(n, dim)
    label_off = _HEADER.size + feat_bytes
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=label_off).astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"sample {i} has label {labels[i]} >= C={C}", offset=label_off + 4 * i)
    if not np.isfinite(features).all():
        i = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
        raise DataFormatError(f"sample {i} has non-finite features", offset=_HEADER.size + 4 * dim * i)
    try:
        return FeatureDataset(features.astype(np.float64), labels, int(C))
    except ContractError as exc:
        raise DataFormatError(str(exc), offset=_HEADER.size) from None


def save_csv(ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for lab, row in zip(ds.labels, ds.features):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])


def parse_csv(text):
    labels, rows = [], []
    width = None
    for lineno, record in enumerate(csv.reader(text.splitlines()), start=1):
        if not record or all(not f.strip() for f in record):
            continue
        if width is None:
            width = len(record)
            if width < 2:
                raise DataFormatError("need a label and at least one feature", line=lineno)
        elif len(record) != width:
            raise DataFormatError(f"expected {width} columns, found {len(record)}", line=lineno)
        try:
            lab = int(record[0])
            feats = [float(f) for f in record[1:]]
        except ValueError as exc:
            raise DataFormatError(f"unparseable field: {exc}", line=lineno) from None
        if lab < 0:
            raise DataFormatError(f"negative label {lab}", line=lineno)
        if not all(math.isfinite(v) for v in feats):
            raise DataFormatError("non-finite feature", line=lineno)
        labels.append(lab)
        rows.append(feats)
    if not rows:
        raise DataFormatError("no samples", line=1)
    labels = np.asarray(labels, dtype=np.int64)
    try:
        return FeatureDataset(np.asarray(rows), labels, int(labels.max()) + 1)
    except ContractError as exc:
        raise DataFormatError(str(exc), line=1) from None


def load_features(path, format=None):
    """Read a dataset; format is inferred from the extension when omitted."""
    path = str(path)
    if format is None:
        format = "csv" if path.lower().endswith(".csv") else "binary"
    if format == "csv":
        with open(path, newline="") as fh:
            return parse_csv(fh.read())
    if format == "binary":
        with open(path, "rb") as fh:
            return parse_binary(fh.read())
    raise ContractError(f"unknown format {format!r}; expected csv or binary")


def save_features(ds, path, format=None):
    path = str(path)
    if format is None:
        format = "csv" if path.lower().endswith(".csv") else "binary"
    if format == "csv":
        save_csv(ds, path)
    elif format == "binary":
        save_binary(ds, path)
    else:
        raise ContractError(f"unknown format {format!r}; expected csv or binary")


def subset_classes(ds, classes):
    """Samples of ``classes``, relabelled densely in the given order."""
    classes = list(classes)
    remap = {c: i for i, c in enumerate(classes)}
    mask = np.isin(ds.labels, classes)
    labels = np.array([remap[c] for c in ds.labels[mask]], dtype=np.int64)
    return FeatureDataset(ds.features[mask], labels, len(classes))


def split_by_class(ds, train_fraction=0.5, seed=0):
    """Class-disjoint split; returns (train, test, (train_classes, test_classes))."""
    C = ds.num_classes
    if C < 2:
        raise ContractError("need at least 2 classes to split")
    n_train = math.ceil(train_fraction * C)
    if n_train <= 0 or n_train >= C:
        raise ContractError(f"train_fraction={train_fraction} leaves an empty split for C={C}")
    order = np.random.default_rng(seed).permutation(C)
    train_classes = sorted(order[:n_train].tolist())
    test_classes = sorted(order[n_train:].tolist())
    return (
        subset_classes(ds, train_classes),
        subset_classes(ds, test_classes),
        (train_classes, test_classes),
    )


class BalancedBatchSampler:
    """P classes x K samples per batch, drawn from a seeded generator."""

    def __init__(self, ds, P, K, rng):
        if P > ds.num_classes:
            raise ContractError(f"batch needs {P} classes but the dataset has {ds.num_classes}")
        if P < 2 or K < 2:
            raise ContractError("need P >= 2 and K >= 2 for in-batch triplets")
        self.P, self.K = P, K
        self.rng = rng
        self.by_class = ds.class_indices()

    def sample(self):
        classes = self.rng.choice(len(self.by_class), size=self.P, replace=False)
        picks = []
        for c in classes:
            pool = self.by_class[c]
            picks.append(self.rng.choice(pool, size=self.K, replace=pool.size < self.K))
        return np.concatenate(picks)


def sample_balanced_batch(ds, P, K, rng):
    return BalancedBatchSampler(ds, P, K, rng).sample()
