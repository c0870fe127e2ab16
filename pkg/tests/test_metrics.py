import math

import numpy as np
import pytest

from conftest import make_dataset
from fbnll_simulator.ClusterAssignment import ClusterAssignment
from fbnll_simulator.LabelCorrection import CorrectionReport
from fbnll_simulator.LocalLearner import SoftmaxLearner
from fbnll_simulator.Metrics import (
    accuracy_summary,
    cluster_recovery,
    correction_accuracy,
    detection_scores,
    payload_report,
    round_payload_bytes,
    similarity_gap,
)
from fbnll_simulator.SimilarityMatrix import SimilarityMatrix
from fbnll_simulator.UserPartition import UserPartition


def _report(changes):
    report = CorrectionReport()
    report.relabels = dict(changes)
    report.sample_dispositions = {sid: "sample-wise" for sid in changes}
    return report


class TestClusterRecovery:

    def test_perfect_and_label_permutation(self):
        tasks = [0] * 10 + [1] * 10
        assert cluster_recovery(ClusterAssignment.from_labels(tasks, 2), tasks) == 1.0
        swapped = [1 - t for t in tasks]
        assert cluster_recovery(ClusterAssignment.from_labels(swapped, 2), tasks) == 1.0

    def test_one_misplaced_user(self):
        tasks = [0] * 10 + [1] * 10
        labels = list(tasks)
        labels[3] = 1
        assert cluster_recovery(ClusterAssignment.from_labels(labels, 2), tasks) == pytest.approx(0.95)

    def test_many_clusters_use_assignment_solver(self):
        tasks = list(range(10)) * 2
        labels = [(t + 3) % 10 for t in tasks]
        labels[0] = labels[1]
        assert cluster_recovery(ClusterAssignment.from_labels(labels, 10), tasks) == pytest.approx(0.95)

    def test_single_cluster(self):
        tasks = [0, 0, 1, 1]
        assert cluster_recovery(ClusterAssignment.single_cluster(4), tasks) == 0.5


class TestSimilarityGap:

    def test_gap(self):
        R = np.array([
            [1.0, 0.9, 0.2],
            [0.9, 1.0, 0.3],
            [0.2, 0.3, 1.0],
        ])
        gap = similarity_gap(SimilarityMatrix(R, R, np.zeros((3, 3), dtype=int), 1), [0, 0, 1])
        assert gap == pytest.approx(0.6)

    def test_no_within_pairs(self):
        R = np.eye(2)
        assert math.isnan(similarity_gap(SimilarityMatrix(R, R, np.zeros((2, 2), dtype=int), 1), [0, 1]))


class TestCorrectionMetrics:

    def test_detection_matches_counts(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = 30
            true = rng.integers(0, 3, size=n)
            observed = np.where(rng.random(n) < 0.3, rng.integers(0, 3, size=n), true)
            user = make_dataset(np.zeros((n, 1)), observed, true)
            changed = {int(i): (0, 0) for i in np.flatnonzero(rng.random(n) < 0.3)}
            precision, recall = detection_scores(UserPartition((user,), (0,), 3), [_report(changed)])

            noisy = {i for i in range(n) if observed[i] != true[i]}
            hits = len(noisy & set(changed))
            assert precision == (hits / len(changed) if changed else 1.0)
            assert recall == (hits / len(noisy) if noisy else 1.0)

    def test_nothing_detected(self):
        user = make_dataset(np.zeros((2, 1)), [1, 0], [0, 0])
        precision, recall = detection_scores(UserPartition((user,), (0,), 2), [_report({})])
        assert precision == 1.0
        assert recall == 0.0

    def test_correction_accuracy(self):
        user = make_dataset(np.zeros((4, 1)), [0, 1, 2, 1], [0, 1, 1, 1])
        report = _report({1: (2, 1), 2: (1, 2), 3: (0, 1)})
        assert correction_accuracy(UserPartition((user,), (0,), 3), [report]) == pytest.approx(2 / 3)


class TestAccuracyAndPayload:

    def test_summary_ignores_missing(self):
        mean, std = accuracy_summary([0.5, np.nan, 1.0])
        assert mean == 0.75
        assert std == 0.25

    def test_round_payload(self):
        P = SoftmaxLearner(324, 10, 64).num_params
        assert round_payload_bytes(20, P) == 3_432_000

    def test_clustering_is_small_against_training(self):
        ranks = np.full((20, 20), 10)
        np.fill_diagonal(ranks, 0)
        R = SimilarityMatrix(np.eye(20), np.eye(20), ranks, 324)
        payload = payload_report(20, SoftmaxLearner(324, 10, 64).num_params, 80, R)
        assert payload.clustering_pair == 12_960
        assert payload.clustering_total == 20 * 19 * 12_960
        assert payload.training_total == 80 * 3_432_000
        assert payload.clustering_share_of_round < 0.01
        assert payload.to_dict()["clustering_share_of_round"] == pytest.approx(12_960 / 3_432_000)
