"""
ExperimentConfig reads the YAML experiment description and turns it into the typed
configuration objects of every stage.

All keys are optional; missing keys take the defaults of the reference experiments (K=20,
alpha=0.25, rho=0.4, beta=0.2, 8% impurity, 200 clean samples per class, learning rate 5e-4,
E=2, batch 64, G=80, q_max=10, tau_sim=0.5). Unknown keys are rejected so a typo never
silently falls back to a default.

The master seed is copied into every seeded section, so `with_overrides(seed=...)` is the
only place a run's seed changes.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import yaml

from fbnll_simulator.Errors import ConfigError
from fbnll_simulator.FeatureMapper import FeatureMapper, HogParams
from fbnll_simulator.LabelCorrection import CorrectionConfig
from fbnll_simulator.LocalLearner import TrainingHyper
from fbnll_simulator.NoiseModels import NoiseConfig
from fbnll_simulator.SyntheticData import SyntheticSpec
from fbnll_simulator.UserPartition import FederationConfig, TaskSpec
from fbnll_simulator.utils import config_hash, get_file_path

logger = logging.getLogger(__name__)

METHODS = ("fbnll", "fbnll_minus", "ifca", "single_global")
DATASET_SOURCES = ("synthetic", "cifar10", "embedding")

_SCHEMA: Dict[str, Optional[Tuple[str, ...]]] = {
    "dataset": ("source", "paths", "synthetic"),
    "tasks": None,
    "federation": ("users", "clusters", "classes", "rounds", "local_epochs", "impurity_fraction"),
    "validation": ("per_class", "test_fraction"),
    "noise": ("kind", "alpha", "rho", "beta"),
    "features": ("clustering", "correction"),
    "similarity": ("q", "q_max", "rank_threshold", "linkage"),
    "correction": ("tau_sim", "phase1_rank", "phase2_rank", "rank_threshold"),
    "learner": ("hidden_units",),
    "training": ("learning_rate", "batch_size", "momentum", "weight_decay"),
    "method": None,
    "seed": None,
    "seeds": None,
    "output_dir": None,
}
_SYNTHETIC_KEYS = (
    "num_classes", "classes_per_task", "samples_per_class", "dim", "separation", "covariance_scale",
    "shared_axes", "task_marker_scale",
)
_MAPPER_KEYS = ("kind", "path", "input_dim", "hog")


def _check_keys(section: str, values: Any, allowed) -> Dict[str, Any]:
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section '{section}'")
    return values


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "cifar10"
    paths: Tuple[str, ...] = ()
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"unknown dataset source '{self.source}', choose from {DATASET_SOURCES}")
        if self.source != "synthetic" and not self.paths:
            raise ConfigError(f"dataset source '{self.source}' needs at least one path")


@dataclass(frozen=True)
class ValidationConfig:
    """
    Attributes:
        per_class (int): n_s^c, clean samples per class kept by the PS
        test_fraction (float): Held-out share of each user's own-task samples
    """
    per_class: int = 200
    test_fraction: float = 0.2


@dataclass(frozen=True)
class SimilarityConfig:
    q: Optional[int] = None
    q_max: int = 10
    rank_threshold: float = 1e-6
    linkage: str = "average"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    tasks: TaskSpec
    federation: FederationConfig
    validation: ValidationConfig
    noise: NoiseConfig
    clustering_mapper: FeatureMapper
    correction_mapper: FeatureMapper
    similarity: SimilarityConfig
    correction: CorrectionConfig
    hidden_units: int
    training: TrainingHyper
    method: str = "fbnll"
    seeds: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}', choose from {METHODS}")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be at least 1, got {self.seeds}")
        if self.tasks.num_tasks != self.federation.clusters:
            raise ConfigError(f"{self.tasks.num_tasks} tasks defined but federation.clusters={self.federation.clusters}")
        self.tasks.validate(self.federation.classes)

    @property
    def seed(self) -> int:
        return self.federation.seed

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        raw = _check_keys("<root>", raw or {}, _SCHEMA)
        sections = {name: _check_keys(name, raw.get(name), keys)
                    for name, keys in _SCHEMA.items() if keys is not None}
        seed = int(raw.get("seed", 0))

        ds_raw = sections["dataset"]
        synthetic = SyntheticSpec(**_check_keys("dataset.synthetic", ds_raw.get("synthetic"), _SYNTHETIC_KEYS))
        paths = ds_raw.get("paths") or ()
        dataset = DatasetConfig(
            source=ds_raw.get("source", "cifar10"),
            paths=tuple([paths] if isinstance(paths, str) else paths),
            synthetic=synthetic,
        )
        is_synthetic = dataset.source == "synthetic"

        tasks_raw = raw.get("tasks")
        if tasks_raw is None:
            tasks = synthetic.task_spec() if is_synthetic else TaskSpec.preset("cifar10_two")
        elif isinstance(tasks_raw, str):
            tasks = TaskSpec.preset(tasks_raw)
        else:
            tasks = TaskSpec(tuple(tuple(t) for t in tasks_raw))

        fed_raw = dict(sections["federation"])
        fed_raw.setdefault("classes", synthetic.num_classes if is_synthetic else 10)
        fed_raw.setdefault("clusters", tasks.num_tasks)
        federation = FederationConfig(seed=seed, **fed_raw)

        default_kind = "identity" if dataset.source != "cifar10" else "hog"
        features = sections["features"]
        train_raw = sections["training"]
        return cls(
            dataset=dataset,
            tasks=tasks,
            federation=federation,
            validation=ValidationConfig(**sections["validation"]),
            noise=NoiseConfig(seed=seed, **sections["noise"]),
            clustering_mapper=_mapper("features.clustering", features.get("clustering"), default_kind),
            correction_mapper=_mapper("features.correction", features.get("correction"), default_kind),
            similarity=SimilarityConfig(**sections["similarity"]),
            correction=CorrectionConfig(**sections["correction"]),
            hidden_units=int(sections["learner"].get("hidden_units", 0)),
            training=TrainingHyper(
                rounds=federation.rounds, local_epochs=federation.local_epochs, seed=seed, **train_raw
            ),
            method=raw.get("method", "fbnll"),
            seeds=int(raw.get("seeds", 1)),
            output_dir=str(raw.get("output_dir", "results")),
        )

    def with_overrides(self, seed: Optional[int] = None, method: Optional[str] = None,
                       output_dir: Optional[str] = None, seeds: Optional[int] = None) -> "ExperimentConfig":
        """Applies CLI flags; the seed is pushed into every seeded section."""
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                federation=replace(cfg.federation, seed=seed),
                noise=replace(cfg.noise, seed=seed),
                training=replace(cfg.training, seed=seed),
            )
        if method is not None:
            cfg = replace(cfg, method=method)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        if seeds is not None:
            cfg = replace(cfg, seeds=seeds)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        """Canonical form with the same layout as the YAML file."""
        fed = vars(self.federation).copy()
        fed.pop("seed")
        noise = vars(self.noise).copy()
        noise.pop("seed")
        training = vars(self.training).copy()
        for key in ("seed", "rounds", "local_epochs"):
            training.pop(key)
        return {
            "dataset": {
                "source": self.dataset.source,
                "paths": list(self.dataset.paths),
                "synthetic": vars(self.dataset.synthetic).copy(),
            },
            "tasks": [list(t) for t in self.tasks.tasks],
            "federation": fed,
            "validation": vars(self.validation).copy(),
            "noise": noise,
            "features": {
                "clustering": _mapper_dict(self.clustering_mapper),
                "correction": _mapper_dict(self.correction_mapper),
            },
            "similarity": vars(self.similarity).copy(),
            "correction": vars(self.correction).copy(),
            "learner": {"hidden_units": self.hidden_units},
            "training": training,
            "method": self.method,
            "seed": self.seed,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
        }

    def hash(self) -> str:
        """SHA-256 of the canonical config; the output directory does not take part."""
        canonical = self.to_dict()
        canonical.pop("output_dir")
        return config_hash(canonical)


def _mapper(section: str, raw: Optional[Dict[str, Any]], default_kind: str) -> FeatureMapper:
    raw = _check_keys(section, raw, _MAPPER_KEYS)
    hog = HogParams(**_check_keys(f"{section}.hog", raw.get("hog"), tuple(vars(HogParams()))))
    return FeatureMapper(
        kind=raw.get("kind", default_kind),
        hog=hog,
        embedding_path=raw.get("path"),
        input_dim=raw.get("input_dim"),
    )


def _mapper_dict(mapper: FeatureMapper) -> Dict[str, Any]:
    return {
        "kind": mapper.kind,
        "path": mapper.embedding_path,
        "input_dim": mapper.input_dim,
        "hog": vars(mapper.hog).copy(),
    }


def load_config(path: str) -> ExperimentConfig:
    """
    Reads and validates a YAML experiment file.

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: On YAML syntax errors, unknown keys or invalid values
    """
    abs_path = get_file_path(path, "config file")
    with open(abs_path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{abs_path}: not valid YAML ({e})") from e
    try:
        cfg = ExperimentConfig.from_dict(raw)
    except TypeError as e:
        # dataclass constructors reject unexpected keyword arguments with TypeError
        raise ConfigError(f"{abs_path}: {e}") from e
    logger.info("Loaded config %s (method %s, seed %d)", abs_path, cfg.method, cfg.seed)
    return cfg
