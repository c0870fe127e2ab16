"""
UserPartition distributes a dataset over K users that each want to learn one of M tasks.

The module provides three main classes:
- TaskSpec: The M disjoint label sets, one per task
- FederationConfig: User, cluster and class counts, round counts, seed and impurity
- UserPartition: Per-user datasets plus the intended task of every user

and the operations that build partitions:
- partition_users: IID split of each task's samples among that task's users, followed by
  cross-task impurity
- holdout_test_split: Per-user clean test sets restricted to the user's own task
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from fbnll_simulator.Errors import ConfigError, InsufficientSamplesError
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.utils import derive_rng

logger = logging.getLogger(__name__)

TASK_PRESETS: Dict[str, Tuple[Tuple[int, ...], ...]] = {
    "cifar10_two": ((0, 1, 8, 9), (2, 3, 4, 5, 6, 7)),
    "cifar10_three": ((0, 1, 8), (9, 2, 3), (4, 5, 6, 7)),
    "cifar10_five": ((0, 1), (8, 9), (2, 3), (4, 5), (6, 7)),
    "svhn_two": ((0, 2, 4, 6, 8), (1, 3, 5, 7, 9)),
    "svhn_three": ((0, 2, 4), (6, 8, 1), (3, 5, 7, 9)),
    "svhn_five": ((0, 2), (4, 6), (8, 1), (3, 5), (7, 9)),
}


@dataclass(frozen=True)
class TaskSpec:
    """
    Ordered list of M pairwise disjoint, nonempty label sets over classes [C].
    """
    tasks: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        tasks = tuple(tuple(int(c) for c in t) for t in self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if not tasks:
            raise ConfigError("a task specification needs at least one task")
        seen = set()
        for m, task in enumerate(tasks):
            if not task:
                raise ConfigError(f"task {m} is empty")
            if len(set(task)) != len(task):
                raise ConfigError(f"task {m} lists a class twice: {task}")
            overlap = seen.intersection(task)
            if overlap:
                raise ConfigError(f"task {m} overlaps earlier tasks on classes {sorted(overlap)}")
            seen.update(task)

    @classmethod
    def preset(cls, name: str) -> "TaskSpec":
        if name not in TASK_PRESETS:
            raise ConfigError(f"unknown task preset '{name}', choose from {sorted(TASK_PRESETS)}")
        return cls(TASK_PRESETS[name])

    @classmethod
    def consecutive(cls, num_classes: int, classes_per_task: int) -> "TaskSpec":
        """Groups classes 0..C-1 into consecutive blocks of `classes_per_task`."""
        if classes_per_task < 1 or num_classes % classes_per_task:
            raise ConfigError(f"{num_classes} classes cannot be split into tasks of {classes_per_task}")
        return cls(tuple(
            tuple(range(s, s + classes_per_task)) for s in range(0, num_classes, classes_per_task)
        ))

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def validate(self, num_classes: int) -> None:
        for m, task in enumerate(self.tasks):
            bad = [c for c in task if c < 0 or c >= num_classes]
            if bad:
                raise ConfigError(f"task {m} uses classes {bad} outside [0, {num_classes})")

    def task_of_class(self, num_classes: int) -> np.ndarray:
        """Lookup array: class -> task index, -1 for classes that belong to no task."""
        lookup = np.full(num_classes, -1, dtype=np.int64)
        for m, task in enumerate(self.tasks):
            lookup[list(task)] = m
        return lookup

    def complement(self, m: int) -> List[int]:
        """Sorted classes of all tasks other than task m."""
        return sorted(c for j, task in enumerate(self.tasks) if j != m for c in task)


@dataclass(frozen=True)
class FederationConfig:
    """
    Attributes:
        users (int): K
        clusters (int): M
        classes (int): C
        rounds (int): G, global communication rounds
        local_epochs (int): E
        seed (int): 64-bit master seed
        impurity_fraction (float): Fraction of each task group redistributed to all users
    """
    users: int = 20
    clusters: int = 2
    classes: int = 10
    rounds: int = 80
    local_epochs: int = 2
    seed: int = 0
    impurity_fraction: float = 0.08

    def __post_init__(self):
        if not self.users >= self.clusters >= 1:
            raise ConfigError(f"need K >= M >= 1, got K={self.users}, M={self.clusters}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be at least 1")
        if self.classes < 1:
            raise ConfigError("classes must be at least 1")
        if not 0.0 <= self.impurity_fraction < 1.0:
            raise ConfigError(f"impurity_fraction must be in [0, 1), got {self.impurity_fraction}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class UserPartition:
    """
    Per-user datasets and each user's intended task (ground truth for metrics only).
    """
    users: Tuple[LabeledDataset, ...]
    intended_task: Tuple[int, ...]
    num_classes: int
    metadata: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "intended_task", tuple(int(m) for m in self.intended_task))
        if len(self.users) != len(self.intended_task):
            raise ConfigError("one intended task per user is required")

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def total_samples(self) -> int:
        return sum(u.n for u in self.users)

    def with_users(self, users: Sequence[LabeledDataset]) -> "UserPartition":
        return UserPartition(tuple(users), self.intended_task, self.num_classes, dict(self.metadata))

    def map_users(self, fn) -> "UserPartition":
        return self.with_users([fn(u) for u in self.users])

    def effective_noise_rate(self) -> float:
        total = self.total_samples
        if total == 0:
            return 0.0
        return sum(int(u.noise_mask().sum()) for u in self.users) / total

    def to_dict(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_classes": self.num_classes,
            "intended_task": list(self.intended_task),
            "samples_per_user": [u.n for u in self.users],
            "effective_noise_rate": self.effective_noise_rate(),
        }


def partition_users(ds: LabeledDataset, spec: TaskSpec, cfg: FederationConfig) -> UserPartition:
    """
    Splits a clean dataset among K users with cross-task impurity.

    Users 0..K/M-1 want task 0, the next K/M users task 1, and so on. Each task's samples
    are shuffled; ceil(impurity_fraction * n_group) of them are withdrawn into a common pool
    and the rest are split IID (as evenly as possible) among the task's users. Every pooled
    sample then goes to a user drawn uniformly from all K users.

    Samples whose class belongs to no task are discarded with a warning.

    Args:
        ds (LabeledDataset): Clean dataset, observed labels equal true labels
        spec (TaskSpec): Task definitions
        cfg (FederationConfig): K, M, C, seed and impurity fraction

    Returns:
        UserPartition: K datasets; sample ids form a disjoint cover of the task samples

    Raises:
        ConfigError: If K is not divisible by M or the task count differs from M
        InsufficientSamplesError: If some task has no samples
    """
    spec.validate(cfg.classes)
    if spec.num_tasks != cfg.clusters:
        raise ConfigError(f"{spec.num_tasks} tasks defined but M={cfg.clusters}")
    if cfg.users % cfg.clusters:
        raise ConfigError(f"K={cfg.users} users cannot be split equally among M={cfg.clusters} tasks")

    per_task = cfg.users // cfg.clusters
    intended = [k // per_task for k in range(cfg.users)]
    task_of = spec.task_of_class(cfg.classes)
    labels = ds.observed_labels
    in_range = labels < cfg.classes
    sample_task = np.full(ds.n, -1, dtype=np.int64)
    sample_task[in_range] = task_of[labels[in_range]]

    orphans = int((sample_task < 0).sum())
    if orphans:
        logger.warning("Discarding %d samples whose class belongs to no task", orphans)

    rng = derive_rng(cfg.seed, "partition")
    assigned: List[List[np.ndarray]] = [[] for _ in range(cfg.users)]
    pool: List[np.ndarray] = []
    for m in range(cfg.clusters):
        group = np.flatnonzero(sample_task == m)
        if group.size == 0:
            raise InsufficientSamplesError(f"task {m} {spec.tasks[m]} has no samples")
        group = rng.permutation(group)
        withdraw = math.ceil(cfg.impurity_fraction * group.size)
        pool.append(group[:withdraw])
        chunks = np.array_split(group[withdraw:], per_task)
        for offset, chunk in enumerate(chunks):
            assigned[m * per_task + offset].append(chunk)

    pooled = np.concatenate(pool)
    receivers = rng.integers(0, cfg.users, size=pooled.size)
    for k in range(cfg.users):
        assigned[k].append(pooled[receivers == k])

    users = [ds.subset(np.concatenate(parts)) for parts in assigned]
    logger.info(
        "Partitioned %d samples over %d users (%d redistributed as impurity)",
        sum(u.n for u in users), cfg.users, pooled.size,
    )
    return UserPartition(tuple(users), tuple(intended), cfg.classes,
                         {"impurity_fraction": cfg.impurity_fraction})


def holdout_test_split(
    part: UserPartition, spec: TaskSpec, fraction: float, seed: int
) -> Tuple[UserPartition, UserPartition]:
    """
    Holds out a seeded fraction of every user's samples whose true label lies in the
    user's intended task.

    The test datasets carry true labels as observed labels and are never corrupted.

    Returns:
        tuple: (train partition, test partition)
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"test fraction must be in [0, 1), got {fraction}")
    train, test = [], []
    for k, user in enumerate(part.users):
        rng = derive_rng(seed, "holdout", k)
        own = np.flatnonzero(np.isin(user.true_labels, spec.tasks[part.intended_task[k]]))
        take = np.sort(rng.choice(own, size=int(math.floor(fraction * own.size)), replace=False))
        keep = np.ones(user.n, dtype=bool)
        keep[take] = False
        train.append(user.subset(np.flatnonzero(keep)))
        test.append(user.subset(take).as_clean())
    return part.with_users(train), part.with_users(test)
