"""
ClusterAssignment turns the similarity matrix into M user clusters by hierarchical
agglomerative clustering (HAC) on the dissimilarity 1 - R.

The clustering starts from K singletons and repeatedly merges the closest pair of clusters
until M remain. Linkage distances are recomputed from the member dissimilarities at every
step. Ties go to the pair whose (smaller minimum member, larger minimum member) is
lexicographically smallest. Output columns are ordered by each cluster's smallest user index.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import pandas as pd

from fbnll_simulator.Errors import ConfigError, ShapeError
from fbnll_simulator.SimilarityMatrix import SimilarityMatrix

logger = logging.getLogger(__name__)

LINKAGES = ("single", "complete", "average")


@dataclass(frozen=True)
class MergeStep:
    """
    One merge, numbered like a scipy linkage row: singletons are 0..K-1 and the cluster
    created by merge i is K + i.
    """
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """
    Attributes:
        ci (np.ndarray): K x M binary matrix, exactly one 1 per row, no empty column
        merge_trace (List[MergeStep]): Merges in the order they happened
    """
    ci: np.ndarray
    merge_trace: List[MergeStep] = field(default_factory=list)

    def __post_init__(self):
        ci = np.asarray(self.ci, dtype=np.int64)
        if ci.ndim != 2:
            raise ShapeError(f"CI must be a K x M matrix, got shape {ci.shape}")
        if not np.all((ci == 0) | (ci == 1)) or not np.all(ci.sum(axis=1) == 1):
            raise ShapeError("every row of CI must be one-hot")
        object.__setattr__(self, "ci", ci)

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_clusters: int) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        ci = np.zeros((labels.size, num_clusters), dtype=np.int64)
        ci[np.arange(labels.size), labels] = 1
        return cls(ci)

    @classmethod
    def single_cluster(cls, num_users: int) -> "ClusterAssignment":
        return cls(np.ones((num_users, 1), dtype=np.int64))

    @property
    def num_users(self) -> int:
        return int(self.ci.shape[0])

    @property
    def num_clusters(self) -> int:
        return int(self.ci.shape[1])

    @property
    def labels(self) -> np.ndarray:
        """Cluster index of every user."""
        return np.argmax(self.ci, axis=1)

    @property
    def sizes(self) -> np.ndarray:
        return self.ci.sum(axis=0)

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.ci[:, m])

    def all_nonempty(self) -> bool:
        return bool(np.all(self.sizes >= 1))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.ci,
            index=[f"user_{k}" for k in range(self.num_users)],
            columns=[f"cluster_{m}" for m in range(self.num_clusters)],
        )

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path)

    @classmethod
    def from_csv(cls, path: str) -> "ClusterAssignment":
        return cls(pd.read_csv(path, index_col=0).to_numpy(dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "sizes": self.sizes,
            "merge_trace": [vars(step) for step in self.merge_trace],
        }


def _linkage_distance(dist: np.ndarray, a: List[int], b: List[int], linkage: str) -> float:
    block = dist[np.ix_(a, b)]
    if linkage == "single":
        return float(block.min())
    if linkage == "complete":
        return float(block.max())
    return float(block.mean())


def hac_cluster(R: SimilarityMatrix, M: int, linkage: str = "average") -> ClusterAssignment:
    """
    Agglomerates users into exactly M clusters.

    Args:
        R (SimilarityMatrix): Symmetric similarities in [0, 1]
        M (int): Number of clusters, 1 <= M <= K
        linkage (str): "average" (default), "single" or "complete"

    Returns:
        ClusterAssignment: CI with columns ordered by smallest member, and the merge trace

    Raises:
        ConfigError: If M is outside [1, K] or the linkage is unknown
    """
    values = R.values if isinstance(R, SimilarityMatrix) else np.asarray(R, dtype=np.float64)
    K = values.shape[0]
    if values.shape != (K, K):
        raise ShapeError(f"similarity matrix must be square, got {values.shape}")
    if not 1 <= M <= K:
        raise ConfigError(f"cannot form M={M} clusters from K={K} users")
    if linkage not in LINKAGES:
        raise ConfigError(f"unknown linkage '{linkage}', choose from {LINKAGES}")

    dist = 1.0 - values
    # each cluster: (scipy-style id, sorted members)
    clusters = [(k, [k]) for k in range(K)]
    trace: List[MergeStep] = []
    next_id = K

    while len(clusters) > M:
        clusters.sort(key=lambda c: c[1][0])
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                height = _linkage_distance(dist, clusters[i][1], clusters[j][1], linkage)
                # strict < keeps the earliest (lexicographically smallest) pair on ties
                if best is None or height < best[0]:
                    best = (height, i, j)
        height, i, j = best
        (id_a, mem_a), (id_b, mem_b) = clusters[i], clusters[j]
        merged = sorted(mem_a + mem_b)
        trace.append(MergeStep(id_a, id_b, height, len(merged)))
        logger.debug("merge %d + %d at height %.6f -> %s", id_a, id_b, height, merged)
        clusters = [c for idx, c in enumerate(clusters) if idx not in (i, j)]
        clusters.append((next_id, merged))
        next_id += 1

    clusters.sort(key=lambda c: c[1][0])
    ci = np.zeros((K, M), dtype=np.int64)
    for m, (_, members) in enumerate(clusters):
        ci[members, m] = 1
    logger.info("HAC (%s linkage) formed %d clusters with sizes %s", linkage, M, ci.sum(axis=0).tolist())
    return ClusterAssignment(ci, trace)
