# cli.py

import argparse
import logging
import sys

from fbnll_simulator.ArtifactStore import ArtifactStore
from fbnll_simulator.Errors import FbnllError
from fbnll_simulator.ExperimentConfig import METHODS, ExperimentConfig, load_config
from fbnll_simulator.ExperimentRunner import (
    CLUSTERED_METHODS,
    build_reference,
    make_learner,
    run_experiments,
    stage,
    stage_cluster,
    stage_correct,
    stage_evaluate,
    stage_noise,
    stage_partition,
    stage_similarity,
    stage_train,
)
from fbnll_simulator.LabelCorrection import CorrectionReport

DEFAULT_CONFIG = "configs/synthetic_two_task.yaml"


def training_stage(cfg: ExperimentConfig) -> str:
    """The artifact a method trains on: corrected labels for fbnll, noisy labels otherwise."""
    return "correct" if cfg.method == "fbnll" else "noise"


def cmd_partition(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    server_clean, train, tests = stage_partition(cfg, store)
    print(f"=== Partitioned {train.total_samples} training samples over {train.num_users} users ===")
    print(f" Server reference: {server_clean.n} clean samples")
    print(f" Held-out test samples: {tests.total_samples}")


def cmd_inject_noise(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("inject-noise"):
        train = store.load_partition("partition")
    noisy, realization = stage_noise(cfg, store, train)
    print(f"=== Injected {cfg.noise.kind} noise ===")
    print(f" Noisy users: {sum(realization.noisy_flags)} of {noisy.num_users}")
    print(f" Effective noise rate: {noisy.effective_noise_rate():.4f}")


def cmd_similarity(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("similarity"):
        noisy = store.load_partition("noise")
    R = stage_similarity(cfg, store, noisy)
    print(f"=== Similarity matrix for {R.num_users} users written to {store.path('similarity', 'csv')} ===")
    print(f" Clustering payload: {R.total_payload_bytes()} bytes")


def cmd_cluster(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("cluster"):
        R = store.load_similarity()
    ci = stage_cluster(cfg, store, R)
    print(f"=== HAC formed {ci.num_clusters} clusters ===")
    for m in range(ci.num_clusters):
        print(f" Cluster {m}: users {ci.members(m).tolist()}")


def cmd_correct(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("correct"):
        server_clean = store.load_dataset("server_clean")
        noisy = store.load_partition("noise")
    corrected, reports, _ = stage_correct(cfg, store, server_clean, noisy)
    print(f"=== Corrected {sum(r.detected for r in reports)} labels ===")
    print(f" Effective noise rate: {noisy.effective_noise_rate():.4f} -> {corrected.effective_noise_rate():.4f}")


def cmd_train(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("train"):
        train = store.load_partition(training_stage(cfg))
        tests = store.load_partition("test")
        ci = store.load_clusters() if cfg.method in CLUSTERED_METHODS else None
    models, ci_used, log, _, _ = stage_train(cfg, store, train, tests, ci, progress=True)
    print(f"=== Trained {len(models)} model(s) with {cfg.method} for {cfg.training.rounds} rounds ===")
    if log.rows and "mean_test_accuracy" in log.rows[-1]:
        print(f" Final mean test accuracy: {log.rows[-1]['mean_test_accuracy']:.4f}")


def cmd_evaluate(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    with stage("evaluate"):
        models = store.load_models("models")
        ci = store.load_clusters("train_clusters")
        trained_on = store.load_partition(training_stage(cfg))
        tests = store.load_partition("test")
        noisy = store.load_partition("noise")
        R = store.load_similarity() if store.has("similarity", "npz") else None
        reports, reference = None, None
        if cfg.method == "fbnll":
            reports = [CorrectionReport.from_dict(r) for r in store.load_json("correction")]
            reference = build_reference(cfg, store.load_dataset("server_clean"))
        learner = make_learner(cfg, trained_on.users[0])
    bundle = stage_evaluate(cfg, store, models, ci, trained_on, tests, learner, R, noisy, reports, reference)
    print_metrics(bundle)


def cmd_run(cfg: ExperimentConfig, store: ArtifactStore) -> None:
    frame = run_experiments(cfg, progress=True)
    print(f"=== {cfg.method}: {len(frame)} run(s) written to {store.root} ===")
    for _, row in frame.iterrows():
        print(f" seed {row['seed']}: recovery {row['cluster_recovery']:.3f}, "
              f"noise {row['noise_rate_before']:.4f} -> {row['noise_rate_after']:.4f}, "
              f"accuracy {row['accuracy_mean']:.4f} +/- {row['accuracy_std']:.4f}")
    if len(frame) > 1:
        print(f" Mean accuracy over seeds: {frame['accuracy_mean'].mean():.4f} "
              f"+/- {frame['accuracy_mean'].std(ddof=0):.4f}")


def print_metrics(bundle) -> None:
    print("=== Evaluation ===")
    print(f" Cluster recovery: {bundle.cluster_recovery:.3f}")
    print(f" Similarity gap: {bundle.similarity_gap:.4f}")
    print(f" Noise rate: {bundle.noise_rate_before:.4f} -> {bundle.noise_rate_after:.4f}")
    print(f" Detection precision/recall: {bundle.detection_precision:.3f} / {bundle.detection_recall:.3f}")
    print(f" Correction accuracy: {bundle.correction_accuracy:.3f}")
    print(f" Test accuracy: {bundle.accuracy_mean:.4f} +/- {bundle.accuracy_std:.4f}")


COMMANDS = {
    "partition": cmd_partition,
    "inject-noise": cmd_inject_noise,
    "similarity": cmd_similarity,
    "cluster": cmd_cluster,
    "correct": cmd_correct,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Simulate feature-based clustering and noisy-label correction for personalized federated learning."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=DEFAULT_CONFIG, help="Path to the YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides the config)")
    common.add_argument("--method", choices=METHODS, default=None, help="Method (overrides the config)")
    common.add_argument("--out", type=str, default=None, help="Output directory (overrides the config)")
    common.add_argument("--seeds", type=int, default=None, help="Number of seeded runs for 'run'")
    common.add_argument("-v", "--verbose", action="store_true", help="Log per-user and per-class detail")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"Run the '{name}' stage" if name != "run" else "Run the full pipeline")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, method=args.method, output_dir=args.out, seeds=args.seeds
        )
        COMMANDS[args.command](cfg, ArtifactStore(cfg.output_dir))
    except (FbnllError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
