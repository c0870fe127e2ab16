"""
Synthetic Gaussian classes for desk-scale experiments.

By default class c is drawn from N(separation * e_c, covariance_scale^2 * I_d): the means sit
on scaled coordinate axes, so every class occupies its own direction of the feature space and
the classes of one task span a subspace orthogonal to those of every other task.

With shared_axes the tasks reuse the same classes_per_task axes, rotated by one position per
task, so one region of the feature space carries a different label in every task. A
task_marker_scale > 0 then adds zero-mean noise of that standard deviation on one extra axis
per task. The marker changes the second moment of a task's data but not its mean, so it
tells users apart without telling a linear classifier which task a sample came from.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fbnll_simulator.Errors import ConfigError, ShapeError
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.UserPartition import TaskSpec
from fbnll_simulator.utils import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Attributes:
        num_classes (int): C
        classes_per_task (int): Classes of each consecutive task block
        samples_per_class (int): Exact count generated for every class
        dim (int): d, at least the number of mean and marker axes (defaults to that count)
        separation (float): Distance of every class mean from the origin, >= 0
        covariance_scale (float): Standard deviation of the isotropic noise, > 0
        shared_axes (bool): Tasks share their class axes, rotated per task
        task_marker_scale (float): Standard deviation on each task's marker axis, >= 0
    """
    num_classes: int = 6
    classes_per_task: int = 3
    samples_per_class: int = 200
    dim: Optional[int] = None
    separation: float = 6.0
    covariance_scale: float = 1.0
    shared_axes: bool = False
    task_marker_scale: float = 0.0

    def __post_init__(self):
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ConfigError("synthetic data needs C >= 2 and at least one sample per class")
        if self.separation < 0:
            raise ConfigError(f"separation must be non-negative, got {self.separation}")
        if self.covariance_scale <= 0:
            raise ConfigError(f"covariance_scale must be positive, got {self.covariance_scale}")
        if self.task_marker_scale < 0:
            raise ConfigError(f"task_marker_scale must be non-negative, got {self.task_marker_scale}")

    @property
    def num_tasks(self) -> int:
        return -(-self.num_classes // self.classes_per_task)

    @property
    def mean_axes(self) -> int:
        return self.classes_per_task if self.shared_axes else self.num_classes

    @property
    def required_dim(self) -> int:
        return self.mean_axes + (self.num_tasks if self.task_marker_scale > 0 else 0)

    @property
    def feature_dim(self) -> int:
        return self.required_dim if self.dim is None else self.dim

    def class_axis(self, c: int) -> int:
        if not self.shared_axes:
            return c
        task, position = divmod(c, self.classes_per_task)
        return (position + task) % self.classes_per_task

    def task_spec(self) -> TaskSpec:
        return TaskSpec.consecutive(self.num_classes, self.classes_per_task)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> LabeledDataset:
    """
    Draws samples_per_class samples of every class, class by class, with sample ids 0..n-1
    and observed labels equal to the true labels.

    Raises:
        ShapeError: If d is smaller than the number of mean and marker axes
    """
    d, C = spec.feature_dim, spec.num_classes
    if d < spec.required_dim:
        raise ShapeError(f"dimension d={d} cannot hold the {spec.required_dim} axes of {C} classes")
    rng = derive_rng(seed, "synthetic")
    means = np.zeros((C, d))
    for c in range(C):
        means[c, spec.class_axis(c)] = spec.separation
    labels = np.repeat(np.arange(C), spec.samples_per_class)
    features = means[labels] + spec.covariance_scale * rng.standard_normal((labels.size, d))
    if spec.task_marker_scale > 0:
        marker_axis = spec.mean_axes + labels // spec.classes_per_task
        rows = np.arange(labels.size)
        features[rows, marker_axis] += spec.task_marker_scale * rng.standard_normal(labels.size)
    logger.info("Generated %d synthetic samples (C=%d, d=%d, separation %.2f)", labels.size, C, d, spec.separation)
    return LabeledDataset(features, labels, labels, np.arange(labels.size))
