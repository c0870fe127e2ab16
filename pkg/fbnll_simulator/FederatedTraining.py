"""
FederatedTraining runs cluster-wise federated optimisation over a LocalLearner.

- fedavg_round / train_fbnll: every user trains its cluster's model, the PS averages the
  updates of each cluster independently (unweighted mean of the members)
- ifca_init / ifca_reassociate / train_ifca: the loss-driven IFCA baseline that keeps all
  M clusters nonempty in every round
- train_single_global: all users share one model

Local training of user k in round g always uses the seed derived from (seed, "local", g, k),
independent of which cluster the user belongs to. All clusters start from one common
initialisation derived from (seed, "init").
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from fbnll_simulator.ClusterAssignment import ClusterAssignment
from fbnll_simulator.Errors import (
    AggregationError,
    ConfigError,
    EmptyUserError,
    InitializationError,
    ShapeError,
)
from fbnll_simulator.LocalLearner import LocalLearner, TrainingHyper
from fbnll_simulator.UserPartition import UserPartition
from fbnll_simulator.utils import derive_seed

logger = logging.getLogger(__name__)

IFCA_INIT_RETRIES = 100


@dataclass
class TrainingLog:
    """
    One row per communication round: per-cluster mean train loss, per-user test accuracy
    and the number of users that changed cluster (IFCA churn, 0 for fixed clusters).
    """
    method: str = ""
    rows: List[Dict[str, float]] = field(default_factory=list)

    def append(self, round_index: int, cluster_losses: Sequence[float],
               user_accuracies: Optional[Sequence[float]], churn: int) -> None:
        row: Dict[str, float] = {"round": round_index, "churn": churn}
        for m, loss in enumerate(cluster_losses):
            row[f"cluster_{m}_loss"] = float(loss)
        if user_accuracies is not None:
            accs = np.asarray(user_accuracies, dtype=np.float64)
            row["mean_test_accuracy"] = float(np.nanmean(accs)) if np.any(~np.isnan(accs)) else float("nan")
            for k, acc in enumerate(accs):
                row[f"user_{k}_accuracy"] = float(acc)
        self.rows.append(row)

    def cluster_losses(self, m: int) -> List[float]:
        return [row[f"cluster_{m}_loss"] for row in self.rows]

    def churn_series(self) -> List[int]:
        return [int(row["churn"]) for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


def _local_seed(seed: int, round_index: int, k: int) -> int:
    return derive_seed(seed, "local", round_index, k)


def initial_models(learner: LocalLearner, M: int, seed: int) -> List[np.ndarray]:
    """M copies of one seeded initialisation."""
    w0 = learner.init(derive_seed(seed, "init"))
    return [w0.copy() for _ in range(M)]


def fedavg_round(
    models: Sequence[np.ndarray],
    ci: ClusterAssignment,
    partition: UserPartition,
    learner: LocalLearner,
    hyper: TrainingHyper,
    round_index: int = 0,
) -> List[np.ndarray]:
    """
    One communication round: local training of every user on its cluster model, then
    w_m = sum_k CI[k, m] w_(k, m) / sum_k CI[k, m] for every cluster.

    Raises:
        EmptyUserError: If a user holds no training samples
        AggregationError: If a cluster has no members or CI and the models disagree on M
    """
    if len(models) != ci.num_clusters:
        raise AggregationError(f"{len(models)} models for {ci.num_clusters} clusters")
    if ci.num_users != partition.num_users:
        raise AggregationError(f"CI covers {ci.num_users} users, the partition has {partition.num_users}")

    labels = ci.labels
    updates: List[np.ndarray] = []
    for k, user in enumerate(partition.users):
        if user.n == 0:
            raise EmptyUserError(f"user {k} has no training samples")
        updates.append(learner.train(models[labels[k]], user, hyper, _local_seed(hyper.seed, round_index, k)))

    aggregated = []
    for m in range(ci.num_clusters):
        members = ci.members(m)
        if members.size == 0:
            raise AggregationError(f"cluster {m} has no members to aggregate")
        aggregated.append(np.mean([updates[k] for k in members], axis=0))
    return aggregated


def cluster_train_losses(models: Sequence[np.ndarray], ci: ClusterAssignment,
                         partition: UserPartition, learner: LocalLearner) -> List[float]:
    """Mean local train loss of each cluster's members under the cluster model."""
    losses = []
    for m in range(ci.num_clusters):
        members = [k for k in ci.members(m) if partition.users[k].n]
        losses.append(float(np.mean([learner.loss(models[m], partition.users[k]) for k in members]))
                      if members else float("nan"))
    return losses


def user_test_accuracy(models: Sequence[np.ndarray], ci: ClusterAssignment,
                       tests: UserPartition, learner: LocalLearner) -> np.ndarray:
    """Accuracy of each user's cluster model on its held-out set, NaN for empty test sets."""
    labels = ci.labels
    return np.array([
        learner.accuracy(models[labels[k]], test) if test.n else np.nan
        for k, test in enumerate(tests.users)
    ])


def _log_round(log: Optional[TrainingLog], g: int, models, ci, partition, learner,
               tests: Optional[UserPartition], churn: int) -> None:
    if log is None:
        return
    losses = cluster_train_losses(models, ci, partition, learner)
    accs = None if tests is None else user_test_accuracy(models, ci, tests, learner)
    log.append(g, losses, accs, churn)
    logger.debug("round %d: cluster losses %s, churn %d", g, np.round(losses, 4).tolist(), churn)


def train_fbnll(
    partition: UserPartition,
    ci: ClusterAssignment,
    learner: LocalLearner,
    hyper: TrainingHyper,
    log: Optional[TrainingLog] = None,
    tests: Optional[UserPartition] = None,
    progress: bool = False,
) -> List[np.ndarray]:
    """
    G rounds of cluster-wise FedAvg with the cluster identities fixed.

    Args:
        partition (UserPartition): Training data (observed labels, possibly corrected)
        ci (ClusterAssignment): Cluster identities from HAC
        learner (LocalLearner): Model family
        hyper (TrainingHyper): Rounds, epochs, optimiser settings and seed
        log (TrainingLog): Receives one row per round when given
        tests (UserPartition): Held-out sets for per-round accuracy when given
        progress (bool): Show a progress bar over rounds

    Returns:
        List[np.ndarray]: The M cluster models
    """
    models = initial_models(learner, ci.num_clusters, hyper.seed)
    for g in tqdm(range(1, hyper.rounds + 1), desc="rounds", disable=not progress):
        models = fedavg_round(models, ci, partition, learner, hyper, g)
        _log_round(log, g, models, ci, partition, learner, tests, 0)
    if hyper.rounds:
        logger.info("Trained %d cluster models for %d rounds", ci.num_clusters, hyper.rounds)
    return models


def loss_matrix(models: Sequence[np.ndarray], partition: UserPartition, learner: LocalLearner) -> np.ndarray:
    """L[k, m] = F_k(w_m), the loss of user k's local data under model m."""
    L = np.zeros((partition.num_users, len(models)))
    for k, user in enumerate(partition.users):
        if user.n == 0:
            raise EmptyUserError(f"user {k} has no samples to evaluate")
        for m, w in enumerate(models):
            L[k, m] = learner.loss(w, user)
    return L


def ifca_init(
    partition: UserPartition, learner: LocalLearner, M: int, seed: int,
    max_retries: int = IFCA_INIT_RETRIES,
) -> Tuple[ClusterAssignment, List[np.ndarray]]:
    """
    Draws M random models and assigns every user to the one with the smallest loss
    (smallest m on ties). Redraws until no cluster is empty.

    Raises:
        ConfigError: If K < M
        InitializationError: If every draw within `max_retries` leaves a cluster empty
    """
    K = partition.num_users
    if not 1 <= M <= K:
        raise ConfigError(f"IFCA needs 1 <= M <= K, got M={M}, K={K}")
    for attempt in range(max_retries):
        models = [learner.init(derive_seed(seed, "ifca_init", attempt, m)) for m in range(M)]
        labels = np.argmin(loss_matrix(models, partition, learner), axis=1)
        sizes = np.bincount(labels, minlength=M)
        if np.all(sizes >= 1):
            logger.info("IFCA initialisation succeeded after %d draw(s), sizes %s", attempt + 1, sizes.tolist())
            return ClusterAssignment.from_labels(labels, M), models
        logger.debug("IFCA initialisation draw %d left clusters empty: sizes %s", attempt, sizes.tolist())
    raise InitializationError(f"IFCA initialisation found no draw with {M} nonempty clusters in {max_retries} tries")


def reassociate_from_losses(L: np.ndarray, prev_sizes: Sequence[int]) -> ClusterAssignment:
    """
    Assigns each user to argmin_m L[k, m]. If that empties a cluster, falls back to the
    capacity-greedy rule: for m = 0..M-1, cluster m takes the prev_sizes[m] untaken users
    with the smallest L[:, m]; taken rows are set to +inf.
    """
    L = np.asarray(L, dtype=np.float64)
    K, M = L.shape
    sizes = np.asarray(prev_sizes, dtype=np.int64)
    if sizes.shape != (M,) or sizes.sum() != K or np.any(sizes < 1):
        raise ShapeError(f"previous cluster sizes {sizes.tolist()} must be >= 1 and sum to K={K}")

    labels = np.argmin(L, axis=1)
    if np.all(np.bincount(labels, minlength=M) >= 1):
        return ClusterAssignment.from_labels(labels, M)

    logger.debug("argmin assignment emptied a cluster, using capacity-greedy fallback")
    work = L.copy()
    labels = np.full(K, -1, dtype=np.int64)
    for m in range(M):
        chosen = np.argsort(work[:, m], kind="stable")[:sizes[m]]
        labels[chosen] = m
        work[chosen, :] = np.inf
    return ClusterAssignment.from_labels(labels, M)


def ifca_reassociate(models: Sequence[np.ndarray], partition: UserPartition,
                     learner: LocalLearner, prev_sizes: Sequence[int]) -> ClusterAssignment:
    return reassociate_from_losses(loss_matrix(models, partition, learner), prev_sizes)


def train_ifca(
    partition: UserPartition,
    learner: LocalLearner,
    M: int,
    hyper: TrainingHyper,
    log: Optional[TrainingLog] = None,
    tests: Optional[UserPartition] = None,
    progress: bool = False,
) -> Tuple[List[np.ndarray], List[ClusterAssignment]]:
    """
    IFCA with enforced nonempty clusters.

    Returns:
        tuple: (final models, CI after initialisation and after every round)
    """
    ci, models = ifca_init(partition, learner, M, derive_seed(hyper.seed, "ifca"))
    history = [ci]
    for g in tqdm(range(1, hyper.rounds + 1), desc="rounds", disable=not progress):
        models = fedavg_round(models, ci, partition, learner, hyper, g)
        new_ci = ifca_reassociate(models, partition, learner, ci.sizes)
        churn = int(np.sum(new_ci.labels != ci.labels))
        ci = new_ci
        history.append(ci)
        _log_round(log, g, models, ci, partition, learner, tests, churn)
    logger.info("IFCA finished after %d rounds, final sizes %s", hyper.rounds, ci.sizes.tolist())
    return models, history


def train_single_global(
    partition: UserPartition,
    learner: LocalLearner,
    hyper: TrainingHyper,
    log: Optional[TrainingLog] = None,
    tests: Optional[UserPartition] = None,
    progress: bool = False,
) -> np.ndarray:
    """FB-NLL training with every user in one cluster."""
    ci = ClusterAssignment.single_cluster(partition.num_users)
    return train_fbnll(partition, ci, learner, hyper, log, tests, progress)[0]
