import numpy as np
import pytest

from conftest import make_dataset
from fbnll_simulator.ClusterAssignment import ClusterAssignment
from fbnll_simulator.Errors import AggregationError, ConfigError, EmptyUserError, InitializationError, ShapeError
from fbnll_simulator.FederatedTraining import (
    TrainingLog,
    fedavg_round,
    ifca_init,
    ifca_reassociate,
    initial_models,
    reassociate_from_losses,
    train_fbnll,
    train_ifca,
    train_single_global,
)
from fbnll_simulator.LocalLearner import SoftmaxLearner, TrainingHyper
from fbnll_simulator.UserPartition import UserPartition

HYPER = TrainingHyper(rounds=3, local_epochs=1, learning_rate=0.05, batch_size=32, seed=0)


class FixedUpdateLearner:
    """Returns a preset update per user, keyed by the user's first sample id."""

    def __init__(self, updates):
        self.updates = updates
        self.num_params = len(next(iter(updates.values())))

    def init(self, seed):
        return np.zeros(self.num_params)

    def train(self, params, ds, hyper, seed):
        return np.asarray(self.updates[int(ds.sample_ids[0])], dtype=np.float64)

    def loss(self, params, ds):
        return 0.0

    def accuracy(self, params, ds):
        return 1.0


class DrawCountingLearner:
    """The m-th init of every draw returns [m]; user k's loss is (w - k)^2."""

    def __init__(self, num_clusters):
        self.num_clusters = num_clusters
        self.calls = 0
        self.num_params = 1

    def init(self, seed):
        w = np.array([float(self.calls % self.num_clusters)])
        self.calls += 1
        return w

    def loss(self, params, ds):
        return float((params[0] - ds.sample_ids[0]) ** 2)


class ConstantLossLearner(DrawCountingLearner):

    def loss(self, params, ds):
        return 1.0


def _users(count):
    return UserPartition(
        tuple(make_dataset(np.ones((2, 2)), [0, 1], first_id=k) for k in range(count)), (0,) * count, 2
    )


def _mapped(partition):
    return SoftmaxLearner(partition.users[0].dim, partition.num_classes)


class TestFedAvg:

    def test_mean_of_member_updates(self):
        part = UserPartition(
            (make_dataset(np.ones((1, 2)), [0], first_id=0), make_dataset(np.ones((1, 2)), [0], first_id=10)),
            (0, 0), 2,
        )
        learner = FixedUpdateLearner({0: [1.0, 2.0], 10: [3.0, 4.0]})
        models = fedavg_round([np.zeros(2)], ClusterAssignment.single_cluster(2), part, learner, HYPER)
        np.testing.assert_array_equal(models[0], [2.0, 3.0])

    def test_single_member_keeps_its_update(self):
        part = _users(3)
        learner = FixedUpdateLearner({0: [1.0], 1: [5.0], 2: [7.0]})
        ci = ClusterAssignment.from_labels([0, 1, 1], 2)
        models = fedavg_round([np.zeros(1), np.zeros(1)], ci, part, learner, HYPER)
        np.testing.assert_array_equal(models[0], [1.0])
        np.testing.assert_array_equal(models[1], [6.0])

    def test_identical_updates_are_exact(self):
        learner = FixedUpdateLearner({k: [0.25, 0.75] for k in range(5)})
        models = fedavg_round([np.zeros(2)], ClusterAssignment.single_cluster(5), _users(5), learner, HYPER)
        np.testing.assert_array_equal(models[0], [0.25, 0.75])

    def test_model_count_must_match(self):
        learner = FixedUpdateLearner({0: [1.0], 1: [1.0]})
        with pytest.raises(AggregationError):
            fedavg_round([np.zeros(1)] * 3, ClusterAssignment.from_labels([0, 1], 2), _users(2), learner, HYPER)

    def test_empty_user(self):
        part = UserPartition((make_dataset(np.ones((2, 2)), [0, 1]), make_dataset(np.zeros((0, 2)), [])), (0, 0), 2)
        with pytest.raises(EmptyUserError):
            fedavg_round([np.zeros(6)], ClusterAssignment.single_cluster(2), part, SoftmaxLearner(2, 2), HYPER)


class TestTrainFbnll:

    def test_clusters_do_not_interact(self, small_partition):
        learner = _mapped(small_partition)
        ci = ClusterAssignment.from_labels(small_partition.intended_task, 2)
        base = train_fbnll(small_partition, ci, learner, HYPER)
        user = small_partition.users[3]
        changed = small_partition.users[:3] + (user.with_features(user.features * 2.0 + 1.0),)
        other = train_fbnll(small_partition.with_users(changed), ci, learner, HYPER)
        np.testing.assert_array_equal(base[0], other[0])
        assert not np.array_equal(base[1], other[1])

    def test_zero_rounds_returns_initial_models(self, small_partition):
        learner = _mapped(small_partition)
        ci = ClusterAssignment.from_labels(small_partition.intended_task, 2)
        models = train_fbnll(small_partition, ci, learner, TrainingHyper(rounds=0, seed=4))
        for got, expected in zip(models, initial_models(learner, 2, 4)):
            np.testing.assert_array_equal(got, expected)

    def test_deterministic(self, small_partition):
        learner = _mapped(small_partition)
        ci = ClusterAssignment.from_labels(small_partition.intended_task, 2)
        a = train_fbnll(small_partition, ci, learner, HYPER)
        b = train_fbnll(small_partition, ci, learner, HYPER)
        for wa, wb in zip(a, b):
            np.testing.assert_array_equal(wa, wb)

    def test_cluster_losses_decrease(self, small_partition):
        learner = _mapped(small_partition)
        ci = ClusterAssignment.from_labels(small_partition.intended_task, 2)
        log = TrainingLog("fbnll")
        hyper = TrainingHyper(rounds=5, local_epochs=1, learning_rate=0.005, batch_size=32, seed=0)
        train_fbnll(small_partition, ci, learner, hyper, log)
        for m in range(2):
            losses = log.cluster_losses(m)
            assert len(losses) == 5
            assert all(b < a for a, b in zip(losses, losses[1:]))
        assert log.churn_series() == [0] * 5

    def test_log_has_test_accuracy(self, small_partition):
        learner = _mapped(small_partition)
        ci = ClusterAssignment.from_labels(small_partition.intended_task, 2)
        log = TrainingLog("fbnll")
        train_fbnll(small_partition, ci, learner, HYPER, log, tests=small_partition)
        frame = log.to_frame()
        assert list(frame["round"]) == [1, 2, 3]
        assert {"cluster_0_loss", "cluster_1_loss", "mean_test_accuracy", "user_3_accuracy"} <= set(frame.columns)
        assert frame["mean_test_accuracy"].between(0, 1).all()

    def test_single_global_is_one_cluster_fbnll(self, small_partition):
        learner = _mapped(small_partition)
        single = train_single_global(small_partition, learner, HYPER)
        clustered = train_fbnll(small_partition, ClusterAssignment.single_cluster(4), learner, HYPER)
        np.testing.assert_array_equal(single, clustered[0])


class TestReassociation:

    def test_argmin_assignment(self):
        ci = reassociate_from_losses(np.array([[0.1, 0.9], [0.8, 0.2]]), [1, 1])
        assert ci.labels.tolist() == [0, 1]

    def test_capacity_fallback(self):
        L = np.array([[0.1, 0.5], [0.2, 0.6], [0.3, 0.4]])
        ci = reassociate_from_losses(L, [2, 1])
        assert ci.labels.tolist() == [0, 0, 1]

    def test_single_cluster(self):
        ci = reassociate_from_losses(np.array([[0.3], [0.1], [0.2]]), [3])
        assert ci.labels.tolist() == [0, 0, 0]

    def test_sizes_must_cover_users(self):
        with pytest.raises(ShapeError):
            reassociate_from_losses(np.zeros((3, 2)), [1, 1])

    def test_matches_reference_rule(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            K = int(rng.integers(2, 7))
            M = int(rng.integers(2, min(K, 4) + 1))
            cuts = np.sort(rng.choice(np.arange(1, K), size=M - 1, replace=False))
            sizes = np.diff(np.concatenate([[0], cuts, [K]]))
            L = rng.integers(0, 4, size=(K, M)) / 4.0
            got = reassociate_from_losses(L, sizes).labels.tolist()

            expected = [min(range(M), key=lambda m: (L[k, m], m)) for k in range(K)]
            if len(set(expected)) < M:
                expected, taken = [-1] * K, set()
                for m in range(M):
                    free = sorted((k for k in range(K) if k not in taken), key=lambda k: (L[k, m], k))
                    for k in free[:sizes[m]]:
                        expected[k] = m
                        taken.add(k)
            assert got == expected
            assert np.all(np.bincount(got, minlength=M) >= 1)

    def test_reassociate_uses_model_losses(self):
        learner = DrawCountingLearner(2)
        ci = ifca_reassociate([np.array([0.0]), np.array([2.5])], _users(3), learner, [2, 1])
        assert ci.labels.tolist() == [0, 0, 1]
        ci = ifca_reassociate([np.array([0.0]), np.array([10.0])], _users(3), learner, [1, 2])
        assert ci.labels.tolist() == [0, 1, 1]


class TestIfca:

    def test_init_engineered_losses(self):
        ci, models = ifca_init(_users(3), DrawCountingLearner(3), 3, seed=0)
        assert ci.labels.tolist() == [0, 1, 2]
        assert [float(w[0]) for w in models] == [0.0, 1.0, 2.0]

    def test_init_single_cluster(self):
        ci, _ = ifca_init(_users(4), DrawCountingLearner(1), 1, seed=0)
        assert ci.labels.tolist() == [0, 0, 0, 0]

    def test_init_exhausts_retries(self):
        with pytest.raises(InitializationError):
            ifca_init(_users(3), ConstantLossLearner(2), 2, seed=0, max_retries=5)

    def test_init_needs_enough_users(self):
        with pytest.raises(ConfigError):
            ifca_init(_users(2), DrawCountingLearner(3), 3, seed=0)

    def test_clusters_stay_nonempty(self, small_partition):
        learner = _mapped(small_partition)
        for seed in range(50):
            hyper = TrainingHyper(rounds=2, local_epochs=1, learning_rate=0.05, batch_size=64, seed=seed)
            log = TrainingLog("ifca")
            models, history = train_ifca(small_partition, learner, 2, hyper, log)
            assert len(models) == 2
            assert len(history) == 3
            assert all(ci.all_nonempty() for ci in history)
            assert log.churn_series() == [
                int(np.sum(a.labels != b.labels)) for a, b in zip(history, history[1:])
            ]
