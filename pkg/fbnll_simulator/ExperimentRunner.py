"""
ExperimentRunner orchestrates a full run in pipeline order:

    load -> partition -> inject-noise -> similarity -> cluster -> correct -> train -> evaluate

Every stage is a function that takes the config, an ArtifactStore and the results of earlier
stages, writes its own artifacts and returns its results. The CLI subcommands call the
same functions after reloading earlier artifacts from disk.

Errors raised inside a stage are re-raised as StageError tagged with the stage name.

Methods:
- fbnll: clustering, label correction, cluster-wise training
- fbnll_minus: fbnll without the correction stage
- ifca: loss-driven cluster assignment during training
- single_global: one model for all users
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from fbnll_simulator.ArtifactStore import ArtifactStore
from fbnll_simulator.ClusterAssignment import ClusterAssignment, hac_cluster
from fbnll_simulator.Errors import FbnllError, StageError
from fbnll_simulator.ExperimentConfig import ExperimentConfig
from fbnll_simulator.FeatureMapper import load_embedding_dataset, map_features
from fbnll_simulator.FederatedTraining import TrainingLog, train_fbnll, train_ifca, train_single_global
from fbnll_simulator.LabelCorrection import (
    CleanClassReference,
    CorrectionReport,
    build_class_subspaces,
    correct_partition,
)
from fbnll_simulator.LabeledDataset import LabeledDataset, load_cifar10_batches, split_validation
from fbnll_simulator.LocalLearner import SoftmaxLearner
from fbnll_simulator.Metrics import MetricsBundle, evaluate, payload_report
from fbnll_simulator.NoiseModels import NoiseRealization, inject_noise
from fbnll_simulator.SimilarityMatrix import SimilarityMatrix, build_similarity_matrix
from fbnll_simulator.SyntheticData import generate_synthetic
from fbnll_simulator.UserPartition import UserPartition, holdout_test_split, partition_users
from fbnll_simulator.utils import write_json

logger = logging.getLogger(__name__)

CLUSTERED_METHODS = ("fbnll", "fbnll_minus")


@contextmanager
def stage(tag: str):
    """Tags any simulator or file error raised inside the block with the stage name."""
    try:
        yield
    except StageError:
        raise
    except (FbnllError, FileNotFoundError) as e:
        raise StageError(tag, e) from e


@dataclass
class PipelineResult:
    metrics: MetricsBundle
    clusters: ClusterAssignment
    similarity: Optional[SimilarityMatrix] = None
    realization: Optional[NoiseRealization] = None
    reports: Optional[List[CorrectionReport]] = None
    log: TrainingLog = field(default_factory=TrainingLog)
    ci_history: List[ClusterAssignment] = field(default_factory=list)


def load_source_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    source = cfg.dataset.source
    if source == "synthetic":
        return generate_synthetic(cfg.dataset.synthetic, cfg.seed)
    if source == "cifar10":
        return load_cifar10_batches(cfg.dataset.paths)
    return LabeledDataset.concatenate([load_embedding_dataset(p) for p in cfg.dataset.paths])


def stage_partition(cfg: ExperimentConfig, store: ArtifactStore) -> Tuple[LabeledDataset, UserPartition, UserPartition]:
    """
    Loads the dataset, carves off the clean server reference, partitions the rest over K
    users and holds out every user's test set.

    Returns:
        tuple: (server_clean, clean training partition, test partition)
    """
    with stage("load"):
        ds = load_source_dataset(cfg)
    with stage("partition"):
        server_clean, remainder = split_validation(ds, cfg.validation.per_class, cfg.federation.classes, cfg.seed)
        partition = partition_users(remainder, cfg.tasks, cfg.federation)
        train, tests = holdout_test_split(partition, cfg.tasks, cfg.validation.test_fraction, cfg.seed)
        store.save_dataset("server_clean", server_clean)
        store.save_partition("partition", train)
        store.save_partition("test", tests)
    return server_clean, train, tests


def stage_noise(cfg: ExperimentConfig, store: ArtifactStore, train: UserPartition) -> Tuple[UserPartition, NoiseRealization]:
    with stage("inject-noise"):
        noisy, realization = inject_noise(train, cfg.tasks, cfg.noise)
        store.save_partition("noise", noisy)
        store.save_json("noise", realization.to_dict())
    return noisy, realization


def stage_similarity(cfg: ExperimentConfig, store: ArtifactStore, noisy: UserPartition) -> SimilarityMatrix:
    with stage("similarity"):
        sim = cfg.similarity
        R = build_similarity_matrix(noisy, cfg.clustering_mapper, sim.q, sim.q_max, sim.rank_threshold)
        store.save_similarity(R)
    return R


def stage_cluster(cfg: ExperimentConfig, store: ArtifactStore, R: SimilarityMatrix) -> ClusterAssignment:
    with stage("cluster"):
        ci = hac_cluster(R, cfg.federation.clusters, cfg.similarity.linkage)
        store.save_clusters(ci)
    return ci


def build_reference(cfg: ExperimentConfig, server_clean: LabeledDataset) -> CleanClassReference:
    return build_class_subspaces(
        map_features(cfg.correction_mapper, server_clean), cfg.correction.phase2_rank,
        cfg.federation.classes, cfg.correction.rank_threshold,
    )


def stage_correct(
    cfg: ExperimentConfig, store: ArtifactStore, server_clean: LabeledDataset, noisy: UserPartition
) -> Tuple[UserPartition, List[CorrectionReport], CleanClassReference]:
    """Builds the clean class subspaces and corrects every user in the correction feature space."""
    with stage("correct"):
        mapper = cfg.correction_mapper
        reference = build_reference(cfg, server_clean)
        mapped = [map_features(mapper, u) for u in noisy.users]
        corrected, reports = correct_partition(noisy, reference, cfg.correction, mapped)
        store.save_partition("correct", corrected)
        store.save_json("correction", [r.to_dict() for r in reports])
    return corrected, reports, reference


def make_learner(cfg: ExperimentConfig, sample: LabeledDataset) -> SoftmaxLearner:
    """The reference learner sized for the training feature space (the correction mapper's output)."""
    dim = map_features(cfg.correction_mapper, sample).dim
    return SoftmaxLearner(dim, cfg.federation.classes, cfg.hidden_units)


def stage_train(
    cfg: ExperimentConfig,
    store: ArtifactStore,
    train: UserPartition,
    tests: UserPartition,
    ci: Optional[ClusterAssignment],
    progress: bool = False,
) -> Tuple[List[np.ndarray], ClusterAssignment, TrainingLog, List[ClusterAssignment], SoftmaxLearner]:
    """
    Trains with the configured method on `train` mapped by the correction mapper.

    Returns:
        tuple: (models, CI the models belong to, training log, CI history, learner)
    """
    with stage("train"):
        mapper = cfg.correction_mapper
        mapped_train = train.map_users(lambda u: map_features(mapper, u))
        mapped_tests = tests.map_users(lambda u: map_features(mapper, u))
        learner = make_learner(cfg, train.users[0])
        log = TrainingLog(cfg.method)
        history: List[ClusterAssignment] = []
        if cfg.method in CLUSTERED_METHODS:
            if ci is None:
                raise StageError("train", FbnllError("clustered training needs the cluster stage output"))
            models = train_fbnll(mapped_train, ci, learner, cfg.training, log, mapped_tests, progress)
        elif cfg.method == "ifca":
            models, history = train_ifca(mapped_train, learner, cfg.federation.clusters, cfg.training,
                                         log, mapped_tests, progress)
            ci = history[-1]
            store.save_json("ifca_history", [h.labels for h in history])
        else:
            models = [train_single_global(mapped_train, learner, cfg.training, log, mapped_tests, progress)]
            ci = ClusterAssignment.single_cluster(train.num_users)
        store.save_models("models", models)
        store.save_clusters(ClusterAssignment(ci.ci), "train_clusters")
        log.to_csv(store.target("training_log", "csv"))
    return models, ci, log, history, learner


def stage_evaluate(
    cfg: ExperimentConfig,
    store: ArtifactStore,
    models: List[np.ndarray],
    ci: ClusterAssignment,
    trained_on: UserPartition,
    tests: UserPartition,
    learner: SoftmaxLearner,
    R: Optional[SimilarityMatrix] = None,
    noisy: Optional[UserPartition] = None,
    reports: Optional[List[CorrectionReport]] = None,
    reference: Optional[CleanClassReference] = None,
) -> MetricsBundle:
    with stage("evaluate"):
        mapped_tests = tests.map_users(lambda u: map_features(cfg.correction_mapper, u))
        payload = payload_report(trained_on.num_users, learner.num_params, cfg.training.rounds, R, reports, reference)
        bundle = evaluate(models, ci, trained_on, learner, mapped_tests, R, noisy, reports, payload)
        summary = {
            "config_hash": cfg.hash(),
            "method": cfg.method,
            "seed": cfg.seed,
            "clusters": ci.labels,
            "metrics": bundle.to_dict(),
        }
        if reports is not None:
            summary["correction"] = [r.summary() for r in reports]
        store.save_json("summary", summary)
    return bundle


def run_pipeline_detailed(cfg: ExperimentConfig, progress: bool = False) -> PipelineResult:
    store = ArtifactStore(cfg.output_dir)
    logger.info("Running %s with seed %d into %s", cfg.method, cfg.seed, store.root)
    server_clean, train, tests = stage_partition(cfg, store)
    noisy, realization = stage_noise(cfg, store, train)

    R, ci, reports, reference = None, None, None, None
    trained_on = noisy
    if cfg.method in CLUSTERED_METHODS:
        R = stage_similarity(cfg, store, noisy)
        ci = stage_cluster(cfg, store, R)
        if cfg.method == "fbnll":
            trained_on, reports, reference = stage_correct(cfg, store, server_clean, noisy)

    models, ci_used, log, history, learner = stage_train(cfg, store, trained_on, tests, ci, progress)
    bundle = stage_evaluate(cfg, store, models, ci_used, trained_on, tests, learner, R, noisy, reports, reference)
    store.write_manifest(cfg.hash(), cfg.seed, cfg.method)
    return PipelineResult(bundle, ci if ci is not None else ci_used, R, realization, reports, log, history)


def run_pipeline(cfg: ExperimentConfig, progress: bool = False) -> MetricsBundle:
    """
    Runs every stage for one seed and writes all artifacts to cfg.output_dir.

    Raises:
        StageError: Wrapping the first error, tagged with its stage
    """
    return run_pipeline_detailed(cfg, progress).metrics


SUMMARY_FIELDS = (
    "cluster_recovery", "similarity_gap", "noise_rate_before", "noise_rate_after",
    "detection_precision", "detection_recall", "correction_accuracy", "accuracy_mean", "accuracy_std",
)


def run_experiments(cfg: ExperimentConfig, progress: bool = False) -> pd.DataFrame:
    """
    Runs cfg.seeds independent pipelines with seeds seed, seed+1, ... Each run writes into
    <out>/seed_<s>/ (or <out> itself for a single seed). The per-seed table goes to
    <out>/summary.csv and mean and standard deviation of every metric to <out>/aggregate.json.

    Returns:
        pd.DataFrame: One row per seed
    """
    rows: List[Dict[str, float]] = []
    for i in range(cfg.seeds):
        seed = cfg.seed + i
        out = cfg.output_dir if cfg.seeds == 1 else os.path.join(cfg.output_dir, f"seed_{seed}")
        run_cfg = cfg.with_overrides(seed=seed, output_dir=out)
        bundle = run_pipeline(run_cfg, progress)
        row = {"seed": seed, "method": cfg.method}
        row.update({name: getattr(bundle, name) for name in SUMMARY_FIELDS})
        rows.append(row)

    frame = pd.DataFrame(rows)
    if cfg.seeds > 1:
        os.makedirs(cfg.output_dir, exist_ok=True)
        frame.to_csv(os.path.join(cfg.output_dir, "summary.csv"), index=False)
        numeric = frame[list(SUMMARY_FIELDS)]
        aggregate = {
            "method": cfg.method,
            "seeds": [int(s) for s in frame["seed"]],
            "mean": numeric.mean().to_dict(),
            "std": numeric.std(ddof=0).to_dict(),
        }
        write_json(os.path.join(cfg.output_dir, "aggregate.json"), aggregate)
        logger.info(
            "%d seeds: accuracy %.4f +/- %.4f", cfg.seeds,
            aggregate["mean"]["accuracy_mean"], aggregate["std"]["accuracy_mean"],
        )
    return frame
