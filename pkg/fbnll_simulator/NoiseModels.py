"""
NoiseModels injects label corruption into a UserPartition. Only observed labels change;
features, sample ids and true labels are left as they are.

Supported models:
- class_independent: floor(alpha * n_k) samples drawn from the whole local dataset are all
  mapped to one label drawn from the classes of unintended tasks. An impure sample that
  already carries that label still uses up one of the floor(alpha * n_k) selections, so the
  realised change count (NoiseRealization.changed_counts) can be lower
- class_dependent: the corrupted samples come from one class of the intended task, spilling
  over into further intended classes when the first one runs out
- uniform: each user is noisy with probability rho, with a severity alpha_k ~ U(beta, 1);
  the replacement labels are drawn uniformly from all C classes (the true one included)

Every user draws from its own stream derived from (seed, model, user index), so injection
is reproducible and the per-user work is independent.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from fbnll_simulator.Errors import (
    ConfigError,
    InsufficientSamplesError,
    NoiseModelInapplicableError,
)
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.UserPartition import TaskSpec, UserPartition
from fbnll_simulator.utils import derive_rng

logger = logging.getLogger(__name__)

NOISE_KINDS = ("none", "class_independent", "class_dependent", "uniform")


@dataclass(frozen=True)
class NoiseConfig:
    """
    Attributes:
        kind (str): One of NOISE_KINDS
        alpha (float): Sample-level noise rate of the task-dependent models, in [0, 1)
        rho (float): Probability that a user is noisy (uniform model), in [0, 1]
        beta (float): Lower bound of the per-user noise rate (uniform model), in (0, 1)
        seed (int): Master seed
    """
    kind: str = "none"
    alpha: float = 0.25
    rho: float = 0.4
    beta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind '{self.kind}', choose from {NOISE_KINDS}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")


@dataclass
class NoiseRealization:
    """
    What the injection actually did, for auditing and metrics.

    Attributes:
        kind (str): The noise model
        noisy_flags (List[bool]): Whether each user was corrupted
        alphas (List[float]): Realised per-user noise rate (alpha_k)
        target_labels (List[int]): Single target label per user (-1 if none)
        source_classes (List[List[int]]): Class-dependent model: source classes in draw order
        flipped_ids (List[List[int]]): Sample ids selected for corruption
        changed_counts (List[int]): Selected samples whose observed label actually changed.
            A selected sample that already carried the drawn label keeps it, so this can fall
            below len(flipped_ids[k]) for the class-independent and uniform models.
    """
    kind: str
    noisy_flags: List[bool] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    target_labels: List[int] = field(default_factory=list)
    source_classes: List[List[int]] = field(default_factory=list)
    flipped_ids: List[List[int]] = field(default_factory=list)
    changed_counts: List[int] = field(default_factory=list)

    def record(self, noisy: bool, alpha: float, target: int, sources: List[int], flipped,
               changed: Optional[int] = None) -> None:
        self.noisy_flags.append(bool(noisy))
        self.alphas.append(float(alpha))
        self.target_labels.append(int(target))
        self.source_classes.append([int(c) for c in sources])
        self.flipped_ids.append(sorted(int(i) for i in flipped))
        self.changed_counts.append(len(self.flipped_ids[-1]) if changed is None else int(changed))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "noisy_flags": self.noisy_flags,
            "alphas": self.alphas,
            "target_labels": self.target_labels,
            "source_classes": self.source_classes,
            "flipped_ids": self.flipped_ids,
            "flip_counts": [len(ids) for ids in self.flipped_ids],
            "changed_counts": self.changed_counts,
        }


def _flip_count(alpha: float, n: int) -> int:
    return int(math.floor(alpha * n))


def _unintended_labels(spec: TaskSpec, task: int) -> List[int]:
    labels = spec.complement(task)
    if not labels:
        raise NoiseModelInapplicableError(
            "task-dependent noise needs classes outside the intended task (M=1 has none)"
        )
    return labels


def _class_independent(part: UserPartition, spec: TaskSpec, cfg: NoiseConfig) -> Tuple[UserPartition, NoiseRealization]:
    realization = NoiseRealization("class_independent")
    users: List[LabeledDataset] = []
    for k, user in enumerate(part.users):
        rng = derive_rng(cfg.seed, "class_independent", k)
        target = int(rng.choice(_unintended_labels(spec, part.intended_task[k])))
        count = _flip_count(cfg.alpha, user.n)
        chosen = rng.choice(user.n, size=count, replace=False)
        labels = user.observed_labels.copy()
        changed = int(np.sum(labels[chosen] != target))
        labels[chosen] = target
        users.append(user.with_observed_labels(labels))
        realization.record(count > 0, cfg.alpha, target, [], user.sample_ids[chosen], changed)
        logger.debug("user %d: %d samples mapped to label %d", k, count, target)
    return part.with_users(users), realization


def _class_dependent(part: UserPartition, spec: TaskSpec, cfg: NoiseConfig) -> Tuple[UserPartition, NoiseRealization]:
    realization = NoiseRealization("class_dependent")
    users: List[LabeledDataset] = []
    for k, user in enumerate(part.users):
        task = part.intended_task[k]
        rng = derive_rng(cfg.seed, "class_dependent", k)
        target = int(rng.choice(_unintended_labels(spec, task)))
        need = _flip_count(cfg.alpha, user.n)
        intended = np.isin(user.observed_labels, spec.tasks[task])
        if int(intended.sum()) < need:
            raise InsufficientSamplesError(
                f"user {k} has {int(intended.sum())} intended-task samples, {need} flips required"
            )

        labels = user.observed_labels.copy()
        remaining = sorted(spec.tasks[task])
        sources: List[int] = []
        flipped: List[np.ndarray] = []
        while need > 0:
            source = int(rng.choice(remaining))
            remaining.remove(source)
            members = np.flatnonzero(user.observed_labels == source)
            take = min(members.size, need)
            chosen = rng.choice(members, size=take, replace=False)
            labels[chosen] = target
            flipped.append(chosen)
            sources.append(source)
            need -= take

        chosen_all = np.concatenate(flipped) if flipped else np.zeros(0, dtype=np.int64)
        users.append(user.with_observed_labels(labels))
        realization.record(chosen_all.size > 0, cfg.alpha, target, sources, user.sample_ids[chosen_all])
        logger.debug("user %d: classes %s flipped to label %d", k, sources, target)
    return part.with_users(users), realization


def _uniform(part: UserPartition, cfg: NoiseConfig) -> Tuple[UserPartition, NoiseRealization]:
    realization = NoiseRealization("uniform")
    users: List[LabeledDataset] = []
    for k, user in enumerate(part.users):
        rng = derive_rng(cfg.seed, "uniform", k)
        noisy = bool(rng.random() < cfg.rho)
        if not noisy:
            users.append(user)
            realization.record(False, 0.0, -1, [], [])
            continue
        alpha_k = float(rng.uniform(cfg.beta, 1.0))
        count = _flip_count(alpha_k, user.n)
        chosen = rng.choice(user.n, size=count, replace=False)
        labels = user.observed_labels.copy()
        drawn = rng.integers(0, part.num_classes, size=count)
        changed = int(np.sum(labels[chosen] != drawn))
        labels[chosen] = drawn
        users.append(user.with_observed_labels(labels))
        realization.record(True, alpha_k, -1, [], user.sample_ids[chosen], changed)
        logger.debug("user %d: noisy with alpha_k=%.3f, %d samples relabelled", k, alpha_k, count)
    return part.with_users(users), realization


def inject_class_independent(part: UserPartition, spec: TaskSpec, cfg: NoiseConfig) -> UserPartition:
    return _class_independent(part, spec, cfg)[0]


def inject_class_dependent(part: UserPartition, spec: TaskSpec, cfg: NoiseConfig) -> UserPartition:
    return _class_dependent(part, spec, cfg)[0]


def inject_uniform(part: UserPartition, cfg: NoiseConfig) -> Tuple[UserPartition, np.ndarray, np.ndarray]:
    """
    Returns:
        tuple: (noisy partition, noisy flags of length K, realised alpha_k of length K)
    """
    noisy, realization = _uniform(part, cfg)
    return noisy, np.array(realization.noisy_flags, dtype=bool), np.array(realization.alphas)


def inject_noise(part: UserPartition, spec: TaskSpec, cfg: NoiseConfig) -> Tuple[UserPartition, NoiseRealization]:
    """
    Applies the configured noise model and returns the partition with its realization.
    """
    if cfg.kind == "none":
        realization = NoiseRealization("none")
        for _ in part.users:
            realization.record(False, 0.0, -1, [], [])
        return part, realization
    if cfg.kind == "class_independent":
        noisy, realization = _class_independent(part, spec, cfg)
    elif cfg.kind == "class_dependent":
        noisy, realization = _class_dependent(part, spec, cfg)
    else:
        noisy, realization = _uniform(part, cfg)
    logger.info(
        "Injected %s noise: %d users corrupted, effective noise rate %.4f",
        cfg.kind, sum(realization.noisy_flags), noisy.effective_noise_rate(),
    )
    return noisy, realization
