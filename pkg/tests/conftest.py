import os

import numpy as np
import pytest
import yaml

from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.SyntheticData import SyntheticSpec, generate_synthetic
from fbnll_simulator.UserPartition import FederationConfig, partition_users

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def synthetic_spec():
    return SyntheticSpec(num_classes=6, classes_per_task=3, samples_per_class=120, dim=8)


@pytest.fixture
def synthetic_ds(synthetic_spec):
    return generate_synthetic(synthetic_spec, seed=0)


@pytest.fixture
def small_partition(synthetic_ds, synthetic_spec):
    cfg = FederationConfig(users=4, clusters=2, classes=6, rounds=1, seed=0)
    return partition_users(synthetic_ds, synthetic_spec.task_spec(), cfg)


def make_dataset(features, labels, true_labels=None, first_id=0):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    true_labels = labels if true_labels is None else np.asarray(true_labels)
    ids = np.arange(first_id, first_id + features.shape[0])
    return LabeledDataset(features, labels, true_labels, ids)


@pytest.fixture
def write_cifar(tmp_path):
    """Writes CIFAR-10 style records: write_cifar(name, labels, pixels=None) -> path."""

    def _write(name, labels, pixels=None):
        labels = np.asarray(labels, dtype=np.uint8)
        if pixels is None:
            pixels = np.zeros((labels.size, 3072), dtype=np.uint8)
        records = np.concatenate([labels[:, None], np.asarray(pixels, dtype=np.uint8)], axis=1)
        path = tmp_path / name
        path.write_bytes(records.tobytes())
        return str(path)

    return _write


TINY_CONFIG = {
    "dataset": {
        "source": "synthetic",
        "synthetic": {
            "num_classes": 6,
            "classes_per_task": 3,
            "samples_per_class": 120,
            "dim": 8,
            "separation": 6.0,
        },
    },
    "federation": {"users": 6, "clusters": 2, "rounds": 3, "local_epochs": 1},
    "validation": {"per_class": 20, "test_fraction": 0.2},
    "noise": {"kind": "class_dependent", "alpha": 0.25},
    "similarity": {"rank_threshold": 3.0},
    "correction": {"tau_sim": 0.8, "rank_threshold": 2.0},
    "training": {"learning_rate": 0.05, "batch_size": 32},
    "method": "fbnll",
    "seed": 0,
}


@pytest.fixture
def tiny_config_path(tmp_path):
    """A small synthetic experiment config on disk; its output goes under tmp_path."""

    def _write(**overrides):
        raw = {**TINY_CONFIG, "output_dir": str(tmp_path / "out")}
        raw.update(overrides)
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(raw), encoding="utf-8")
        return str(path)

    return _write
