"""
SimilarityMatrix measures how alike two users' data are without looking at labels.

User k projects user j's top-q eigenvectors through its own second-moment matrix. The
resulting energies are compared with k's own eigenvalues direction by direction, and the
per-direction ratios are aggregated by a geometric mean into r(k, j). The server then
symmetrises, R[k, j] = (r(k, j) + r(j, k)) / 2.

Only eigenvectors cross user boundaries; second-moment matrices and eigenvalues stay local.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from fbnll_simulator.Errors import ConfigError, EmptyUserError, ShapeError
from fbnll_simulator.FeatureMapper import FeatureMapper, map_features
from fbnll_simulator.SpectralSignature import SpectralProfile
from fbnll_simulator.UserPartition import UserPartition

logger = logging.getLogger(__name__)

# values at or below this fraction of the largest local eigenvalue count as zero
ZERO_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class RelevanceScore:
    """
    Attributes:
        value (float): r, the geometric mean of the ratios
        ratios (np.ndarray): s_i in [0, 1], one per direction
        energies (np.ndarray): e_i >= 0, one per direction
    """
    value: float
    ratios: np.ndarray
    energies: np.ndarray


def cross_energy(sigma_local: np.ndarray, foreign_vectors: np.ndarray) -> np.ndarray:
    """
    e_i = || Sigma_local w_i ||_2 for every column w_i of `foreign_vectors`.

    Raises:
        ShapeError: If the dimensions disagree
    """
    sigma_local = np.asarray(sigma_local, dtype=np.float64)
    foreign_vectors = np.asarray(foreign_vectors, dtype=np.float64)
    if foreign_vectors.ndim == 1:
        foreign_vectors = foreign_vectors[:, None]
    if sigma_local.ndim != 2 or sigma_local.shape[0] != sigma_local.shape[1]:
        raise ShapeError(f"second-moment matrix must be square, got {sigma_local.shape}")
    if foreign_vectors.shape[0] != sigma_local.shape[0]:
        raise ShapeError(
            f"eigenvectors of dimension {foreign_vectors.shape[0]} do not match a "
            f"{sigma_local.shape[0]}-dimensional second moment"
        )
    return np.linalg.norm(sigma_local @ foreign_vectors, axis=0)


def relevance(local_eigenvalues: np.ndarray, energies: np.ndarray) -> RelevanceScore:
    """
    Per-direction ratio s_i = min(lambda_i, e_i) / max(lambda_i, e_i), aggregated by a
    geometric mean computed in log space.

    Both values zero gives s_i = 1; exactly one of them zero gives s_i = 0, and any zero
    ratio makes r = 0.

    Raises:
        ShapeError: If the vectors have different lengths
    """
    lam = np.asarray(local_eigenvalues, dtype=np.float64)
    e = np.asarray(energies, dtype=np.float64)
    if lam.shape != e.shape or lam.ndim != 1:
        raise ShapeError(f"eigenvalues {lam.shape} and energies {e.shape} must be equal-length vectors")
    if lam.size == 0:
        raise ShapeError("relevance needs at least one direction")

    scale = float(lam.max())
    floor = ZERO_TOLERANCE * scale
    lam_zero = lam <= floor
    e_zero = e <= floor
    hi = np.maximum(lam, e)
    lo = np.minimum(lam, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(hi > 0, lo / hi, 1.0)
    ratios = np.where(lam_zero & e_zero, 1.0, ratios)
    ratios = np.where(lam_zero ^ e_zero, 0.0, ratios)
    ratios = np.clip(ratios, 0.0, 1.0)

    if np.any(ratios == 0.0):
        value = 0.0
    else:
        value = float(np.exp(np.mean(np.log(ratios))))
    return RelevanceScore(min(value, 1.0), ratios, e)


def directional_relevance(local: SpectralProfile, foreign_vectors: np.ndarray, q: int) -> RelevanceScore:
    """r(local, foreign) at rank q: local eigenvalues against the foreign top-q directions."""
    if not 1 <= q <= min(local.dim, foreign_vectors.shape[1]):
        raise ShapeError(f"rank q={q} is not available on both sides")
    energies = cross_energy(local.sigma, foreign_vectors[:, :q])
    return relevance(local.eigenvalues[:q], energies)


def pair_rank(profile_k: SpectralProfile, profile_j: SpectralProfile, q: Optional[int], q_max: int) -> int:
    """q = min of the two selected ranks (or a fixed q), capped by q_max and d."""
    if q is None:
        q = min(profile_k.rank, profile_j.rank)
    return max(1, min(q, q_max, profile_k.dim))


def relevance_pair(
    features_k: np.ndarray,
    features_j: np.ndarray,
    q: int,
    rank_threshold: float = 1e-6,
) -> Tuple[float, float]:
    """
    Both directional relevances of two users at rank q.

    Returns:
        tuple: (r(k, j), r(j, k))
    """
    profile_k = SpectralProfile.from_features(features_k, rank_threshold)
    profile_j = SpectralProfile.from_features(features_j, rank_threshold)
    if profile_k.dim != profile_j.dim:
        raise ShapeError(f"users live in different feature spaces ({profile_k.dim} vs {profile_j.dim})")
    r_kj = directional_relevance(profile_k, profile_j.eigenvectors, q).value
    r_jk = directional_relevance(profile_j, profile_k.eigenvectors, q).value
    return r_kj, r_jk


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """
    Attributes:
        values (np.ndarray): Symmetric K x K matrix R with unit diagonal
        directional (np.ndarray): K x K matrix of r(k, j) (diagonal 1)
        pair_ranks (np.ndarray): K x K ranks q used per pair (diagonal 0)
        dim (int): Feature dimension d the eigenvectors live in
    """
    values: np.ndarray
    directional: np.ndarray
    pair_ranks: np.ndarray
    dim: int

    @property
    def num_users(self) -> int:
        return int(self.values.shape[0])

    def pair_payload_bytes(self, k: int, j: int) -> int:
        """Bytes of one top-q eigenvector matrix sent between users k and j, as float32."""
        return int(self.dim * self.pair_ranks[k, j] * 4)

    def total_payload_bytes(self) -> int:
        """Sum over ordered pairs k != j of d * q * 4."""
        return int(self.dim * self.pair_ranks.sum() * 4)

    def to_frame(self) -> pd.DataFrame:
        labels = [f"user_{k}" for k in range(self.num_users)]
        return pd.DataFrame(self.values, index=labels, columns=labels)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str) -> "SimilarityMatrix":
        """Restores R only; directional scores are not part of the CSV."""
        frame = pd.read_csv(path, index_col=0)
        values = frame.to_numpy(dtype=np.float64)
        return cls(values, values.copy(), np.zeros(values.shape, dtype=np.int64), 0)

    def to_dict(self) -> dict:
        return {
            "values": self.values,
            "directional": self.directional,
            "pair_ranks": self.pair_ranks,
            "dim": self.dim,
            "pair_payload_bytes": (self.dim * self.pair_ranks * 4),
            "total_payload_bytes": self.total_payload_bytes(),
        }


def user_profiles(
    partition: UserPartition, mapper: FeatureMapper, rank_threshold: float, q_max: int
) -> List[SpectralProfile]:
    profiles: List[SpectralProfile] = []
    for k, user in enumerate(partition.users):
        if user.n == 0:
            raise EmptyUserError(f"user {k} has no samples")
        features = map_features(mapper, user).features
        profile = SpectralProfile.from_features(features, rank_threshold, q_max)
        logger.debug("user %d: n=%d, selected rank %d", k, user.n, profile.rank)
        profiles.append(profile)
    return profiles


def build_similarity_matrix(
    partition: UserPartition,
    mapper: FeatureMapper,
    q: Optional[int] = None,
    q_max: int = 10,
    rank_threshold: float = 1e-6,
) -> SimilarityMatrix:
    """
    Builds R for all K users.

    Args:
        partition (UserPartition): Users in raw feature space
        mapper (FeatureMapper): The clustering feature map
        q (int): Fixed rank for every pair, or None to use each pair's selected ranks
        q_max (int): Cap on the rank, i.e. on the eigenvectors exchanged per user
        rank_threshold (float): Eigenvalue threshold for rank selection

    Returns:
        SimilarityMatrix: Symmetric R with unit diagonal

    Raises:
        ConfigError: If there are fewer than two users
        EmptyUserError: If a user holds no samples
    """
    K = partition.num_users
    if K < 2:
        raise ConfigError(f"a similarity matrix needs at least two users, got {K}")
    if q_max < 1:
        raise ConfigError("q_max must be at least 1")
    profiles = user_profiles(partition, mapper, rank_threshold, q_max)
    dims = {p.dim for p in profiles}
    if len(dims) != 1:
        raise ShapeError(f"users live in different feature spaces: {sorted(dims)}")

    directional = np.eye(K)
    ranks = np.zeros((K, K), dtype=np.int64)
    for k in range(K):
        for j in range(k + 1, K):
            q_kj = pair_rank(profiles[k], profiles[j], q, q_max)
            directional[k, j] = directional_relevance(profiles[k], profiles[j].eigenvectors, q_kj).value
            directional[j, k] = directional_relevance(profiles[j], profiles[k].eigenvectors, q_kj).value
            ranks[k, j] = ranks[j, k] = q_kj

    values = (directional + directional.T) / 2.0
    np.fill_diagonal(values, 1.0)
    logger.info("Built %dx%d similarity matrix (mean off-diagonal %.4f)", K, K,
                (values.sum() - K) / max(K * (K - 1), 1))
    return SimilarityMatrix(values, directional, ranks, dims.pop())
