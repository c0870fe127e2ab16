"""
Metrics computes the numbers a run reports: how well clustering recovered the tasks, how
well correction repaired the labels, how accurate the trained models are, and how many
bytes every stage exchanged.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from fbnll_simulator.ClusterAssignment import ClusterAssignment
from fbnll_simulator.FederatedTraining import user_test_accuracy
from fbnll_simulator.LabelCorrection import CleanClassReference, CorrectionReport
from fbnll_simulator.LocalLearner import LocalLearner
from fbnll_simulator.SimilarityMatrix import SimilarityMatrix
from fbnll_simulator.UserPartition import UserPartition

logger = logging.getLogger(__name__)

EXHAUSTIVE_MATCH_LIMIT = 8


def cluster_recovery(ci: ClusterAssignment, intended_task: Sequence[int]) -> float:
    """
    Fraction of users whose cluster maps to their intended task under the best one-to-one
    cluster-to-task matching. Exhaustive over permutations for M <= 8, Hungarian above.
    """
    labels = ci.labels
    tasks = np.asarray(intended_task, dtype=np.int64)
    size = max(ci.num_clusters, int(tasks.max()) + 1)
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (labels, tasks), 1)

    if size <= EXHAUSTIVE_MATCH_LIMIT:
        best = max(
            sum(confusion[m, perm[m]] for m in range(size))
            for perm in itertools.permutations(range(size))
        )
    else:
        rows, cols = linear_sum_assignment(-confusion)
        best = confusion[rows, cols].sum()
    return float(best) / labels.size


def similarity_gap(R: SimilarityMatrix, intended_task: Sequence[int]) -> float:
    """(min within-task R) - (max cross-task R); NaN when either set of pairs is empty."""
    tasks = np.asarray(intended_task)
    same = tasks[:, None] == tasks[None, :]
    off_diagonal = ~np.eye(tasks.size, dtype=bool)
    within = R.values[same & off_diagonal]
    cross = R.values[~same]
    if within.size == 0 or cross.size == 0:
        return float("nan")
    return float(within.min() - cross.max())


def _noisy_ids(partition: UserPartition) -> set:
    return {int(i) for u in partition.users for i in u.sample_ids[u.noise_mask()]}


def detection_scores(noisy: UserPartition, reports: Sequence[CorrectionReport]) -> Tuple[float, float]:
    """
    Precision and recall of the changed labels as detections of the corrupted samples.
    Both are 1.0 when their denominator is empty.
    """
    truth = _noisy_ids(noisy)
    detected = {sid for r in reports for sid in r.relabels}
    hits = len(truth & detected)
    precision = hits / len(detected) if detected else 1.0
    recall = hits / len(truth) if truth else 1.0
    return precision, recall


def correction_accuracy(corrected: UserPartition, reports: Sequence[CorrectionReport]) -> float:
    """Fraction of changed labels that now equal the true label (1.0 if nothing changed)."""
    changed = {sid for r in reports for sid in r.relabels}
    if not changed:
        return 1.0
    right = 0
    for user in corrected.users:
        for sid, observed, true in zip(user.sample_ids, user.observed_labels, user.true_labels):
            if int(sid) in changed and observed == true:
                right += 1
    return right / len(changed)


def accuracy_summary(accuracies: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation, ignoring NaN entries."""
    values = np.asarray(accuracies, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


def round_payload_bytes(num_users: int, num_params: int) -> int:
    """One training round: every user downloads and uploads one float32 model."""
    return num_users * 2 * num_params * 4


@dataclass
class PayloadReport:
    """
    Bytes exchanged per stage.

    Attributes:
        clustering_pair (int): d * q * 4 for one directed pair (the largest q used)
        clustering_total (int): Sum over all directed pairs
        correction_upload (int): Phase-1 eigenvectors sent by all users
        correction_broadcast (int): Clean subspaces sent to all users
        training_round (int): K * 2 * P * 4
        training_total (int): training_round * G
    """
    clustering_pair: int = 0
    clustering_total: int = 0
    correction_upload: int = 0
    correction_broadcast: int = 0
    training_round: int = 0
    training_total: int = 0

    @property
    def clustering_share_of_round(self) -> float:
        """clustering_pair as a fraction of one training round."""
        return self.clustering_pair / self.training_round if self.training_round else float("nan")

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out["clustering_share_of_round"] = self.clustering_share_of_round
        return out


def payload_report(
    num_users: int,
    num_params: int,
    rounds: int,
    similarity: Optional[SimilarityMatrix] = None,
    reports: Optional[Sequence[CorrectionReport]] = None,
    reference: Optional[CleanClassReference] = None,
) -> PayloadReport:
    payload = PayloadReport()
    if similarity is not None:
        K = similarity.num_users
        if K > 1:
            payload.clustering_pair = max(similarity.pair_payload_bytes(k, j)
                                          for k in range(K) for j in range(K) if k != j)
        payload.clustering_total = similarity.total_payload_bytes()
    if reports is not None and reference is not None:
        payload.correction_upload = sum(r.upload_bytes(reference.dim) for r in reports)
        payload.correction_broadcast = reference.broadcast_bytes() * len(reports)
    payload.training_round = round_payload_bytes(num_users, num_params)
    payload.training_total = payload.training_round * rounds
    return payload


@dataclass
class MetricsBundle:
    cluster_recovery: float = float("nan")
    similarity_gap: float = float("nan")
    noise_rate_before: float = 0.0
    noise_rate_after: float = 0.0
    detection_precision: float = 1.0
    detection_recall: float = 1.0
    correction_accuracy: float = 1.0
    accuracy_mean: float = float("nan")
    accuracy_std: float = float("nan")
    user_accuracies: List[float] = field(default_factory=list)
    payload: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(vars(self))


def evaluate(
    models: Sequence[np.ndarray],
    ci: ClusterAssignment,
    partition: UserPartition,
    learner: LocalLearner,
    tests: UserPartition,
    similarity: Optional[SimilarityMatrix] = None,
    noisy: Optional[UserPartition] = None,
    reports: Optional[Sequence[CorrectionReport]] = None,
    payload: Optional[PayloadReport] = None,
) -> MetricsBundle:
    """
    Fills every MetricsBundle field that the given artifacts allow.

    Args:
        models (Sequence[np.ndarray]): One trained model per cluster of `ci`
        ci (ClusterAssignment): Cluster identities used in training
        partition (UserPartition): Training data as trained on (after correction, if any)
        learner (LocalLearner): Model family
        tests (UserPartition): Per-user held-out test sets
        similarity (SimilarityMatrix): R, for the similarity gap
        noisy (UserPartition): Training data before correction; defaults to `partition`
        reports (Sequence[CorrectionReport]): Correction reports, if correction ran
        payload (PayloadReport): Communication accounting
    """
    bundle = MetricsBundle()
    before = partition if noisy is None else noisy
    bundle.cluster_recovery = cluster_recovery(ci, partition.intended_task)
    if similarity is not None:
        bundle.similarity_gap = similarity_gap(similarity, partition.intended_task)
    bundle.noise_rate_before = before.effective_noise_rate()
    bundle.noise_rate_after = partition.effective_noise_rate()
    if reports is not None:
        bundle.detection_precision, bundle.detection_recall = detection_scores(before, reports)
        bundle.correction_accuracy = correction_accuracy(partition, reports)
    accs = user_test_accuracy(models, ci, tests, learner)
    bundle.user_accuracies = accs.tolist()
    bundle.accuracy_mean, bundle.accuracy_std = accuracy_summary(accs)
    if payload is not None:
        bundle.payload = payload.to_dict()
    logger.info(
        "Cluster recovery %.3f, noise %.4f -> %.4f, accuracy %.4f +/- %.4f",
        bundle.cluster_recovery, bundle.noise_rate_before, bundle.noise_rate_after,
        bundle.accuracy_mean, bundle.accuracy_std,
    )
    return bundle
