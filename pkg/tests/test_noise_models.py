import math

import numpy as np
import pytest

from conftest import make_dataset
from fbnll_simulator.Errors import (
    ConfigError,
    InsufficientSamplesError,
    NoiseModelInapplicableError,
)
from fbnll_simulator.NoiseModels import (
    NoiseConfig,
    inject_class_dependent,
    inject_class_independent,
    inject_noise,
    inject_uniform,
)
from fbnll_simulator.UserPartition import TaskSpec, UserPartition


def _by_id(user):
    return dict(zip(user.sample_ids.tolist(), user.observed_labels.tolist()))


class TestNoiseConfig:

    @pytest.mark.parametrize("kwargs", [{"alpha": 1.0}, {"rho": 1.5}, {"beta": 0.0}, {"kind": "pairflip"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            NoiseConfig(**kwargs)


class TestClassIndependent:

    def test_flip_count_and_target(self, small_partition, synthetic_spec):
        spec = synthetic_spec.task_spec()
        cfg = NoiseConfig(kind="class_independent", alpha=0.25, seed=4)
        noisy, realization = inject_noise(small_partition, spec, cfg)
        for k, (before, after) in enumerate(zip(small_partition.users, noisy.users)):
            target = realization.target_labels[k]
            assert target in spec.complement(small_partition.intended_task[k])
            flipped = realization.flipped_ids[k]
            assert len(flipped) == math.floor(0.25 * before.n)
            labels = _by_id(after)
            original = _by_id(before)
            assert all(labels[sid] == target for sid in flipped)
            untouched = set(original) - set(flipped)
            assert all(labels[sid] == original[sid] for sid in untouched)
            np.testing.assert_array_equal(before.features, after.features)
            np.testing.assert_array_equal(before.true_labels, after.true_labels)

    def test_alpha_zero_changes_nothing(self, small_partition, synthetic_spec):
        noisy = inject_class_independent(small_partition, synthetic_spec.task_spec(),
                                         NoiseConfig(kind="class_independent", alpha=0.0))
        assert noisy.effective_noise_rate() == 0.0

    def test_changed_count_excludes_samples_already_on_target(self):
        ds = make_dataset(np.ones((8, 2)), [2, 2, 2, 2, 0, 1, 0, 1])
        part = UserPartition((ds,), (0,), 3)
        spec = TaskSpec(((0, 1), (2,)))
        for seed in range(20):
            noisy, realization = inject_noise(part, spec, NoiseConfig(kind="class_independent", alpha=0.5, seed=seed))
            original = _by_id(ds)
            flipped = realization.flipped_ids[0]
            assert len(flipped) == 4
            assert realization.target_labels == [2]
            expected = sum(original[sid] != 2 for sid in flipped)
            assert realization.changed_counts == [expected]
            assert int(np.sum(noisy.users[0].observed_labels != ds.observed_labels)) == expected
            assert realization.to_dict()["changed_counts"] == [expected]

    def test_single_task_has_no_unintended_labels(self):
        ds = make_dataset(np.ones((4, 2)), [0, 1, 0, 1])
        part = UserPartition((ds,), (0,), 2)
        with pytest.raises(NoiseModelInapplicableError):
            inject_class_independent(part, TaskSpec(((0, 1),)), NoiseConfig(kind="class_independent"))


class TestClassDependent:

    def test_sources_from_intended_task(self, small_partition, synthetic_spec):
        spec = synthetic_spec.task_spec()
        cfg = NoiseConfig(kind="class_dependent", alpha=0.25, seed=2)
        noisy, realization = inject_noise(small_partition, spec, cfg)
        for k, (before, after) in enumerate(zip(small_partition.users, noisy.users)):
            task = spec.tasks[small_partition.intended_task[k]]
            flipped = set(realization.flipped_ids[k])
            assert len(flipped) == math.floor(0.25 * before.n)
            assert set(realization.source_classes[k]) <= set(task)
            for sid, observed, true in zip(after.sample_ids, after.observed_labels, after.true_labels):
                if int(sid) in flipped:
                    assert true in task
                    assert observed == realization.target_labels[k]
            # every flip changes the label since the target lies outside the task
            assert int(after.noise_mask().sum()) == len(flipped)

    def test_spills_over_into_next_class(self):
        ds = make_dataset(np.ones((10, 2)), [0, 0, 1, 1, 1, 1, 1, 1, 2, 2])
        part = UserPartition((ds,), (0,), 3)
        spec = TaskSpec(((0, 1), (2,)))
        noisy, realization = inject_noise(part, spec, NoiseConfig(kind="class_dependent", alpha=0.5, seed=0))
        assert len(realization.flipped_ids[0]) == 5
        assert noisy.users[0].observed_labels.tolist().count(2) == 7

    def test_insufficient_intended_samples(self):
        ds = make_dataset(np.ones((10, 2)), [0] + [2] * 9)
        part = UserPartition((ds,), (0,), 3)
        with pytest.raises(InsufficientSamplesError):
            inject_class_dependent(part, TaskSpec(((0, 1), (2,))), NoiseConfig(kind="class_dependent", alpha=0.5))


class TestUniform:

    def test_flags_and_rates(self, small_partition):
        cfg = NoiseConfig(kind="uniform", rho=0.5, beta=0.2, seed=9)
        noisy, flags, alphas = inject_uniform(small_partition, cfg)
        assert flags.shape == (4,) and alphas.shape == (4,)
        for k in range(4):
            if flags[k]:
                assert 0.2 <= alphas[k] < 1.0
            else:
                assert alphas[k] == 0.0
                np.testing.assert_array_equal(noisy.users[k].observed_labels,
                                              small_partition.users[k].observed_labels)

    def test_rho_extremes(self, small_partition):
        _, none_flags, _ = inject_uniform(small_partition, NoiseConfig(kind="uniform", rho=0.0))
        _, all_flags, _ = inject_uniform(small_partition, NoiseConfig(kind="uniform", rho=1.0))
        assert not none_flags.any()
        assert all_flags.all()

    def test_changed_counts_match_labels(self, small_partition, synthetic_spec):
        cfg = NoiseConfig(kind="uniform", rho=1.0, seed=3)
        noisy, realization = inject_noise(small_partition, synthetic_spec.task_spec(), cfg)
        for k, (before, after) in enumerate(zip(small_partition.users, noisy.users)):
            changed = int(np.sum(before.observed_labels != after.observed_labels))
            assert realization.changed_counts[k] == changed
            assert changed <= len(realization.flipped_ids[k])

    def test_reproducible(self, small_partition, synthetic_spec):
        cfg = NoiseConfig(kind="uniform", rho=1.0, seed=5)
        a, _ = inject_noise(small_partition, synthetic_spec.task_spec(), cfg)
        b, _ = inject_noise(small_partition, synthetic_spec.task_spec(), cfg)
        for ua, ub in zip(a.users, b.users):
            np.testing.assert_array_equal(ua.observed_labels, ub.observed_labels)


def test_none_returns_partition_unchanged(small_partition, synthetic_spec):
    noisy, realization = inject_noise(small_partition, synthetic_spec.task_spec(), NoiseConfig())
    assert noisy is small_partition
    assert realization.noisy_flags == [False] * 4
