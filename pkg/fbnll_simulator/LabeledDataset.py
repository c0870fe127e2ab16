"""
LabeledDataset holds one collection of samples as it moves through the pipeline: a feature
matrix, the observed (possibly noisy) labels, the hidden true labels and globally stable
sample ids.

Datasets are immutable. Every operation that changes labels or features returns a new
dataset whose arrays are read-only, so partitions can be shared by parallel workers.

The module also provides:
- load_cifar10_binary / load_cifar10_batches: Readers for the CIFAR-10 binary batch format
- split_validation: Carves the clean, class-balanced server reference set off a dataset

true_labels exist for noise injection and metrics only. Clustering and correction code
receives features and observed labels, never true labels.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fbnll_simulator.Errors import (
    CorruptRecordError,
    InsufficientSamplesError,
    MalformedFileError,
    ShapeError,
)
from fbnll_simulator.utils import derive_rng, get_file_path

logger = logging.getLogger(__name__)

CIFAR10_RECORD_BYTES = 3073
CIFAR10_PIXELS = 3072
CIFAR10_CLASSES = 10


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Per-user (or global) feature rows with observed label, true label and sample id.

    Attributes:
        features (np.ndarray): n x p raw features or n x d mapped features
        observed_labels (np.ndarray): Labels as seen by the user, possibly corrupted
        true_labels (np.ndarray): Ground-truth labels, only read by noise and metrics
        sample_ids (np.ndarray): Unique integers, stable across all stages
    """
    features: np.ndarray
    observed_labels: np.ndarray
    true_labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeError(f"features must be a 2-D matrix, got shape {features.shape}")
        n = features.shape[0]
        for name in ("observed_labels", "true_labels", "sample_ids"):
            vec = np.asarray(getattr(self, name))
            if vec.shape != (n,):
                raise ShapeError(f"{name} has shape {vec.shape}, expected ({n},)")
        object.__setattr__(self, "features", _frozen(features, np.float64))
        object.__setattr__(self, "observed_labels", _frozen(self.observed_labels, np.int64))
        object.__setattr__(self, "true_labels", _frozen(self.true_labels, np.int64))
        object.__setattr__(self, "sample_ids", _frozen(self.sample_ids, np.int64))
        if n and (self.observed_labels.min() < 0 or self.true_labels.min() < 0):
            raise ShapeError("labels must be non-negative class indices")
        if len(np.unique(self.sample_ids)) != n:
            raise ShapeError("sample_ids must be unique")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def empty(cls, dim: int) -> "LabeledDataset":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concatenate(cls, parts: Sequence["LabeledDataset"], dim: Optional[int] = None) -> "LabeledDataset":
        """Stacks datasets in order. `dim` is only needed when `parts` is empty."""
        if not parts:
            if dim is None:
                raise ShapeError("cannot concatenate zero datasets without a feature dimension")
            return cls.empty(dim)
        return cls(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.observed_labels for p in parts]),
            np.concatenate([p.true_labels for p in parts]),
            np.concatenate([p.sample_ids for p in parts]),
        )

    def subset(self, indices) -> "LabeledDataset":
        """Returns the rows at `indices` (positions, not sample ids), in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.observed_labels[idx], self.true_labels[idx], self.sample_ids[idx]
        )

    def with_features(self, features: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(features, self.observed_labels, self.true_labels, self.sample_ids)

    def with_observed_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.true_labels, self.sample_ids)

    def as_clean(self) -> "LabeledDataset":
        """Copy whose observed labels are reset to the true labels (held-out test data)."""
        return self.with_observed_labels(self.true_labels)

    def class_histogram(self, num_classes: int, use_true: bool = False) -> np.ndarray:
        labels = self.true_labels if use_true else self.observed_labels
        return np.bincount(labels, minlength=num_classes)[:num_classes]

    def noise_mask(self) -> np.ndarray:
        """Boolean mask of samples whose observed label differs from the true label."""
        return self.observed_labels != self.true_labels

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "dim": self.dim,
            "observed_labels": np.unique(self.observed_labels).tolist(),
            "noisy": int(self.noise_mask().sum()),
        }


def load_cifar10_binary(path: str, id_offset: int = 0) -> LabeledDataset:
    """
    Reads one CIFAR-10 binary batch file.

    Each record is 3073 bytes: one label byte in [0, 9] followed by the 1024 red, 1024 green
    and 1024 blue pixel bytes of a 32x32 image in row-major order.

    Args:
        path (str): Path of the batch file
        id_offset (int): First sample id; record i gets id id_offset + i

    Returns:
        LabeledDataset: n = file_size / 3073 samples with p = 3072 raw pixel features

    Raises:
        FileNotFoundError: If the file does not exist
        MalformedFileError: If the size is not a multiple of 3073 bytes
        CorruptRecordError: If a label byte exceeds 9
    """
    abs_path = get_file_path(path, "CIFAR-10 batch file")
    size = os.path.getsize(abs_path)
    if size % CIFAR10_RECORD_BYTES != 0:
        raise MalformedFileError(
            f"{abs_path}: size {size} is not a multiple of {CIFAR10_RECORD_BYTES} bytes"
        )

    raw = np.fromfile(abs_path, dtype=np.uint8)
    n = size // CIFAR10_RECORD_BYTES
    records = raw.reshape(n, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR10_CLASSES)
    if bad.size:
        raise CorruptRecordError(
            f"{abs_path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} (expected 0-9)"
        )

    features = records[:, 1:].astype(np.float64)
    ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
    logger.info("Loaded %d CIFAR-10 records from %s", n, abs_path)
    return LabeledDataset(features, labels, labels, ids)


def load_cifar10_batches(paths: Sequence[str]) -> LabeledDataset:
    """Concatenates several batch files with globally unique, consecutive sample ids."""
    parts: List[LabeledDataset] = []
    offset = 0
    for path in paths:
        part = load_cifar10_binary(path, id_offset=offset)
        parts.append(part)
        offset += part.n
    return LabeledDataset.concatenate(parts, dim=CIFAR10_PIXELS)


def split_validation(
    ds: LabeledDataset, per_class: int, num_classes: int, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Selects exactly `per_class` samples of every class as the clean server reference.

    Selection is seeded-uniform without replacement within each class. The remainder keeps
    the original row order.

    Args:
        ds (LabeledDataset): Clean dataset (observed labels equal true labels)
        per_class (int): Samples per class for the server, n_s^c
        num_classes (int): Number of classes C
        seed (int): Master seed

    Returns:
        tuple: (server_clean, remainder), disjoint by sample id

    Raises:
        InsufficientSamplesError: If some class has fewer than `per_class` samples
    """
    if per_class < 0:
        raise InsufficientSamplesError(f"per_class must be non-negative, got {per_class}")
    if per_class == 0:
        return LabeledDataset.empty(ds.dim), ds

    rng = derive_rng(seed, "split_validation")
    chosen: List[np.ndarray] = []
    for c in range(num_classes):
        members = np.flatnonzero(ds.observed_labels == c)
        if members.size < per_class:
            raise InsufficientSamplesError(
                f"class {c} has {members.size} samples, {per_class} required for validation"
            )
        chosen.append(rng.choice(members, size=per_class, replace=False))

    server_idx = np.concatenate(chosen)
    keep = np.ones(ds.n, dtype=bool)
    keep[server_idx] = False
    logger.info("Validation split: %d server samples, %d remaining", server_idx.size, int(keep.sum()))
    return ds.subset(server_idx), ds.subset(np.flatnonzero(keep))
