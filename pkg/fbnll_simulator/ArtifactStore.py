"""
ArtifactStore reads and writes the files that connect pipeline stages. Every artifact lives
at <root>/<stage>.<ext>, so a stage run from the CLI can pick up what an earlier stage wrote.

Formats:
- Partitions and datasets: compressed .npz (per-user arrays plus intended tasks)
- R and CI: pandas CSV (R also as .npz to keep directional scores and pair ranks)
- Reports: canonical JSON with sorted keys
- Models: .npz with one array per cluster
- manifest.json: config hash, seed, method and the list of written artifacts
"""

import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from fbnll_simulator.ClusterAssignment import ClusterAssignment, MergeStep
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.SimilarityMatrix import SimilarityMatrix
from fbnll_simulator.UserPartition import UserPartition
from fbnll_simulator.utils import get_file_path, read_json, write_json

logger = logging.getLogger(__name__)


class ArtifactStore:
    """
    Args:
        root (str): Output directory; created on first write
    """

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        self.written: List[str] = []

    def path(self, stage: str, ext: str) -> str:
        return os.path.join(self.root, f"{stage}.{ext}")

    def target(self, stage: str, ext: str) -> str:
        os.makedirs(self.root, exist_ok=True)
        target = self.path(stage, ext)
        name = os.path.basename(target)
        if name not in self.written:
            self.written.append(name)
        logger.debug("writing %s", target)
        return target

    def _source(self, stage: str, ext: str) -> str:
        return get_file_path(self.path(stage, ext), f"{stage} artifact")

    # datasets and partitions

    def save_dataset(self, stage: str, ds: LabeledDataset) -> str:
        target = self.target(stage, "npz")
        np.savez_compressed(target, features=ds.features, observed=ds.observed_labels,
                            true=ds.true_labels, ids=ds.sample_ids)
        return target

    def load_dataset(self, stage: str) -> LabeledDataset:
        with np.load(self._source(stage, "npz")) as data:
            return LabeledDataset(data["features"], data["observed"], data["true"], data["ids"])

    def save_partition(self, stage: str, partition: UserPartition) -> str:
        arrays: Dict[str, np.ndarray] = {
            "intended_task": np.asarray(partition.intended_task, dtype=np.int64),
            "num_classes": np.asarray(partition.num_classes),
        }
        for k, user in enumerate(partition.users):
            arrays[f"features_{k}"] = user.features
            arrays[f"observed_{k}"] = user.observed_labels
            arrays[f"true_{k}"] = user.true_labels
            arrays[f"ids_{k}"] = user.sample_ids
        target = self.target(stage, "npz")
        np.savez_compressed(target, **arrays)
        return target

    def load_partition(self, stage: str) -> UserPartition:
        with np.load(self._source(stage, "npz")) as data:
            intended = data["intended_task"]
            users = [
                LabeledDataset(data[f"features_{k}"], data[f"observed_{k}"], data[f"true_{k}"], data[f"ids_{k}"])
                for k in range(intended.size)
            ]
            return UserPartition(tuple(users), tuple(intended.tolist()), int(data["num_classes"]))

    # clustering artifacts

    def save_similarity(self, R: SimilarityMatrix) -> str:
        R.to_csv(self.target("similarity", "csv"))
        target = self.target("similarity", "npz")
        np.savez_compressed(target, values=R.values, directional=R.directional,
                            pair_ranks=R.pair_ranks, dim=np.asarray(R.dim))
        return target

    def load_similarity(self) -> SimilarityMatrix:
        with np.load(self._source("similarity", "npz")) as data:
            return SimilarityMatrix(data["values"], data["directional"], data["pair_ranks"], int(data["dim"]))

    def save_clusters(self, ci: ClusterAssignment, stage: str = "cluster") -> str:
        """Writes CI as CSV; a HAC merge trace goes to dendrogram.json alongside."""
        target = self.target(stage, "csv")
        ci.to_csv(target)
        if ci.merge_trace:
            self.save_json("dendrogram", [vars(step) for step in ci.merge_trace])
        return target

    def load_clusters(self, stage: str = "cluster") -> ClusterAssignment:
        ci = ClusterAssignment.from_csv(self._source(stage, "csv"))
        if stage == "cluster" and os.path.isfile(self.path("dendrogram", "json")):
            trace = [MergeStep(**step) for step in self.load_json("dendrogram")]
            ci = ClusterAssignment(ci.ci, trace)
        return ci

    def has(self, stage: str, ext: str) -> bool:
        return os.path.isfile(self.path(stage, ext))

    # models and reports

    def save_models(self, stage: str, models: Sequence[np.ndarray]) -> str:
        target = self.target(stage, "npz")
        np.savez_compressed(target, **{f"cluster_{m}": w for m, w in enumerate(models)})
        return target

    def load_models(self, stage: str) -> List[np.ndarray]:
        with np.load(self._source(stage, "npz")) as data:
            return [data[f"cluster_{m}"] for m in range(len(data.files))]

    def save_json(self, stage: str, data: Any) -> str:
        target = self.target(stage, "json")
        write_json(target, data)
        return target

    def load_json(self, stage: str) -> Any:
        return read_json(self._source(stage, "json"))

    def write_manifest(self, config_hash: str, seed: int, method: str,
                       extra: Optional[Dict[str, Any]] = None) -> str:
        """Records what produced the directory. Holds no timestamps, so reruns are byte-identical."""
        manifest = {
            "config_hash": config_hash,
            "seed": seed,
            "method": method,
            "artifacts": sorted(self.written),
        }
        manifest.update(extra or {})
        target = self.path("manifest", "json")
        os.makedirs(self.root, exist_ok=True)
        write_json(target, manifest)
        return target
