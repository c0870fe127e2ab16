import numpy as np
import pytest

from conftest import make_dataset
from fbnll_simulator.Errors import (
    ConfigError,
    IncompleteReferenceError,
    InsufficientSamplesError,
    ShapeError,
)
from fbnll_simulator.LabelCorrection import (
    CLASS_RELABEL,
    CONFIRMED_CLEAN,
    SAMPLE_WISE,
    ClassSubspace,
    CorrectionConfig,
    CorrectionReport,
    build_class_subspaces,
    correct_partition,
    correct_user,
    phase1_class_similarity,
    phase1_decide,
    phase2_project,
)
from fbnll_simulator.NoiseModels import NoiseConfig, inject_noise
from fbnll_simulator.SimilarityMatrix import directional_relevance
from fbnll_simulator.SyntheticData import SyntheticSpec, generate_synthetic
from fbnll_simulator.UserPartition import FederationConfig, UserPartition, partition_users

SPEC = SyntheticSpec(num_classes=6, classes_per_task=3, samples_per_class=100, dim=8)


def _server_reference(seed=1, per_class=40, rank_threshold=3.0):
    clean = generate_synthetic(SyntheticSpec(6, 3, per_class, 8), seed)
    return build_class_subspaces(clean, 15, 6, rank_threshold)


def _orthonormal(rng, d, l):
    q, _ = np.linalg.qr(rng.standard_normal((d, l)))
    return q


class TestCorrectionConfig:

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_tau_range(self, tau):
        with pytest.raises(ConfigError):
            CorrectionConfig(tau_sim=tau)


class TestPhase2:

    def test_matches_projection_argmax(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            d = int(rng.integers(3, 9))
            C = int(rng.integers(2, 6))
            bases = [_orthonormal(rng, d, int(rng.integers(1, d))) for _ in range(C)]
            if rng.random() < 0.2:
                bases[-1] = bases[0]
            subspaces = [ClassSubspace(c, Q, np.ones(Q.shape[1]), 10) for c, Q in enumerate(bases)]
            z = rng.standard_normal(d)
            norms = [np.linalg.norm(Q @ (Q.T @ z)) for Q in bases]
            expected = next(c for c, v in enumerate(norms) if v == max(norms))
            outcome = phase2_project(z, subspaces)
            assert outcome.label == expected
            assert not outcome.ambiguous

    def test_zero_vector_is_ambiguous(self):
        subspaces = [ClassSubspace(c, np.eye(3)[:, [c]], np.ones(1), 5) for c in range(3)]
        outcome = phase2_project(np.zeros(3), subspaces)
        assert outcome.ambiguous
        assert outcome.label == 0

    def test_picks_containing_subspace(self):
        subspaces = [ClassSubspace(c, np.eye(4)[:, [c]], np.ones(1), 5) for c in range(4)]
        assert phase2_project(np.array([0.1, 0.2, 3.0, 0.3]), subspaces).label == 2


class TestPhase1:

    def test_decisions(self):
        assert phase1_decide(np.array([0.1, 0.9, 0.2]), 0.5, 0).disposition == CLASS_RELABEL
        assert phase1_decide(np.array([0.1, 0.9, 0.2]), 0.5, 0).target == 1
        assert phase1_decide(np.array([0.1, 0.9, 0.2]), 0.5, 1).disposition == CONFIRMED_CLEAN
        assert phase1_decide(np.array([0.6, 0.9, 0.2]), 0.5, 1).disposition == SAMPLE_WISE
        assert phase1_decide(np.array([0.1, 0.4, 0.2]), 0.5, 1).disposition == SAMPLE_WISE
        assert phase1_decide(np.array([0.1, 0.5, 0.2]), 0.5, 0).disposition == CLASS_RELABEL

    def test_clean_group_scores_highest_on_own_class(self):
        reference = _server_reference()
        ds = generate_synthetic(SPEC, seed=3)
        group = ds.features[ds.observed_labels == 4]
        scores = phase1_class_similarity(group, reference, 10, rank_threshold=3.0)
        assert int(np.argmax(scores)) == 4
        assert scores[4] > 0.8
        assert np.all(np.delete(scores, 4) < 0.5)

    def test_server_side_sees_only_eigenvectors(self):
        reference = _server_reference()
        rng = np.random.default_rng(0)
        vectors = _orthonormal(rng, 8, 2)
        expected = directional_relevance(reference._profiles[3], vectors, 2).value
        assert reference.server_relevance(3, vectors) == expected

    def test_group_needs_two_samples(self):
        with pytest.raises(InsufficientSamplesError):
            phase1_class_similarity(np.ones((1, 8)), _server_reference(), 10)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            phase1_class_similarity(np.ones((5, 7)), _server_reference(), 10)


class TestReference:

    def test_missing_class(self):
        clean = make_dataset(np.ones((6, 3)), [0, 0, 1, 1, 1, 1])
        with pytest.raises(IncompleteReferenceError, match="class 2"):
            build_class_subspaces(clean, 5, 3)

    def test_subspace_rank_capped(self):
        reference = _server_reference(rank_threshold=1e-6)
        assert all(s.rank == 8 for s in reference.subspaces)
        capped = build_class_subspaces(generate_synthetic(SyntheticSpec(6, 3, 40, 8), 1), 2, 6)
        assert all(s.rank == 2 for s in capped.subspaces)
        assert capped.broadcast_bytes() == 6 * 8 * 2 * 4


class TestCorrectUser:

    def test_clean_user_is_confirmed(self):
        ds = generate_synthetic(SPEC, seed=5)
        user = ds.subset(np.flatnonzero(ds.observed_labels < 3))
        corrected, report = correct_user(user, _server_reference(), CorrectionConfig(tau_sim=0.5, rank_threshold=3.0))
        assert [c.disposition for c in report.classes] == [CONFIRMED_CLEAN] * 3
        assert report.detected == 0
        assert report.confirmed == user.n
        np.testing.assert_array_equal(corrected.observed_labels, user.observed_labels)

    def test_flipped_class_is_relabelled(self):
        ds = generate_synthetic(SPEC, seed=6)
        user = ds.subset(np.flatnonzero(ds.observed_labels < 3))
        labels = user.observed_labels.copy()
        flipped = np.flatnonzero(labels == 0)[:75]
        labels[flipped] = 4
        noisy = user.with_observed_labels(labels)

        corrected, report = correct_user(noisy, _server_reference(), CorrectionConfig(tau_sim=0.8, rank_threshold=3.0))
        group = next(c for c in report.classes if c.observed_class == 4)
        assert group.disposition == CLASS_RELABEL
        assert group.target == 0
        restored = np.mean(corrected.observed_labels[flipped] == 0)
        assert restored >= 0.95
        assert report.summary()["class_relabelled"] == 75

    @pytest.mark.parametrize("seed", [6, 7, 8])
    def test_second_pass_changes_nothing(self, seed):
        ds = generate_synthetic(SPEC, seed=seed)
        user = ds.subset(np.flatnonzero(ds.observed_labels < 3))
        labels = user.observed_labels.copy()
        labels[np.flatnonzero(labels == 0)[:75]] = 4
        cfg = CorrectionConfig(tau_sim=0.8, rank_threshold=3.0)
        reference = _server_reference()

        once, first = correct_user(user.with_observed_labels(labels), reference, cfg)
        twice, second = correct_user(once, reference, cfg)
        assert first.detected > 0
        assert second.detected == 0
        np.testing.assert_array_equal(twice.observed_labels, once.observed_labels)

    def test_singleton_class_goes_to_phase2(self, caplog):
        ds = generate_synthetic(SPEC, seed=7)
        user = ds.subset(np.concatenate([np.flatnonzero(ds.observed_labels == 1)[:30], [0]]))
        labels = user.observed_labels.copy()
        labels[-1] = 5
        with caplog.at_level("WARNING"):
            corrected, report = correct_user(user.with_observed_labels(labels), _server_reference(),
                                             CorrectionConfig(rank_threshold=3.0))
        singleton = next(c for c in report.classes if c.observed_class == 5)
        assert singleton.disposition == SAMPLE_WISE
        assert singleton.scores is None
        assert corrected.observed_labels[-1] == 0
        assert "skipping Phase 1" in caplog.text

    def test_zero_sample_keeps_label(self):
        user = make_dataset(np.zeros((1, 8)), [2], first_id=50)
        corrected, report = correct_user(user, _server_reference(), CorrectionConfig())
        assert corrected.observed_labels.tolist() == [2]
        assert report.ambiguous_ids == [50]
        assert report.detected == 0

    def test_report_to_dict_and_back(self):
        ds = generate_synthetic(SPEC, seed=6)
        user = ds.subset(np.flatnonzero(ds.observed_labels < 3))
        labels = user.observed_labels.copy()
        labels[np.flatnonzero(labels == 0)[:75]] = 4
        _, report = correct_user(user.with_observed_labels(labels), _server_reference(),
                                 CorrectionConfig(tau_sim=0.8, rank_threshold=3.0), user=3)
        restored = CorrectionReport.from_dict(report.to_dict())
        assert restored.user == 3
        assert restored.relabels == report.relabels
        assert restored.summary() == report.summary()


class TestCorrectPartition:

    def test_uniform_noise_is_reduced(self):
        ratios = []
        for seed in range(5):
            ds = generate_synthetic(SyntheticSpec(6, 3, 300, 8), seed)
            part = partition_users(ds, SPEC.task_spec(), FederationConfig(users=10, clusters=2, classes=6, seed=seed))
            noisy, _ = inject_noise(part, SPEC.task_spec(), NoiseConfig(kind="uniform", rho=0.4, beta=0.2, seed=seed))
            reference = _server_reference(seed=100 + seed, rank_threshold=2.0)
            corrected, _ = correct_partition(noisy, reference, CorrectionConfig(tau_sim=0.8, rank_threshold=2.0))
            ratios.append((noisy.effective_noise_rate(), corrected.effective_noise_rate()))
        before = np.mean([b for b, _ in ratios])
        after = np.mean([a for _, a in ratios])
        assert before > 0
        assert after <= 0.5 * before

    @pytest.mark.parametrize("kind", ["class_dependent", "class_independent"])
    @pytest.mark.parametrize("alpha", [0.1, 0.25, 0.5])
    def test_correction_never_raises_noise_rate(self, kind, alpha):
        for seed in range(3):
            ds = generate_synthetic(SyntheticSpec(6, 3, 300, 8), seed)
            part = partition_users(ds, SPEC.task_spec(), FederationConfig(users=6, clusters=2, classes=6, seed=seed))
            noisy, _ = inject_noise(part, SPEC.task_spec(), NoiseConfig(kind=kind, alpha=alpha, seed=seed))
            reference = _server_reference(seed=100 + seed, rank_threshold=2.0)
            corrected, _ = correct_partition(noisy, reference, CorrectionConfig(tau_sim=0.8, rank_threshold=2.0))
            assert corrected.effective_noise_rate() <= noisy.effective_noise_rate()

    def test_mapped_views_must_align(self, small_partition):
        views = list(small_partition.users)
        views[0] = views[0].subset(np.arange(views[0].n - 1))
        with pytest.raises(ShapeError):
            correct_partition(small_partition, _server_reference(), CorrectionConfig(), views)

    def test_labels_written_back_to_raw_users(self, small_partition):
        doubled = small_partition.map_users(lambda u: u.with_features(np.hstack([u.features, u.features])))
        views = list(small_partition.users)
        corrected, reports = correct_partition(doubled, _server_reference(), CorrectionConfig(rank_threshold=3.0), views)
        for raw, view_user in zip(corrected.users, doubled.users):
            assert raw.dim == 16
            np.testing.assert_array_equal(raw.features, view_user.features)
        assert len(reports) == small_partition.num_users


def test_single_user_partition(small_partition):
    part = UserPartition(small_partition.users[:1], (0,), 6)
    corrected, reports = correct_partition(part, _server_reference(), CorrectionConfig(rank_threshold=3.0))
    assert corrected.num_users == 1
    assert reports[0].user == 0
