"""
SpectralSignature captures the dominant structure of a feature matrix: the top-q eigenpairs
of its uncentred second-moment matrix (1/n) F^T F.

Eigenvalues are sorted descending and clamped at zero, and every eigenvector is sign-fixed so
that its largest-magnitude component is positive. Two runs on the same features therefore
produce bit-identical signatures.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from fbnll_simulator.Errors import EmptyUserError, NumericError, RankError, ShapeError

logger = logging.getLogger(__name__)

ORTHONORMALITY_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class SpectralSignature:
    """
    Attributes:
        eigenvalues (np.ndarray): q nonincreasing, nonnegative eigenvalues
        eigenvectors (np.ndarray): d x q orthonormal columns
        sample_count (int): Number of rows the second moment was computed from
    """
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sample_count: int

    @property
    def rank(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def dim(self) -> int:
        return int(self.eigenvectors.shape[0])

    def truncated(self, q: int) -> "SpectralSignature":
        if not 1 <= q <= self.rank:
            raise RankError(f"cannot truncate a rank-{self.rank} signature to q={q}")
        return SpectralSignature(self.eigenvalues[:q], self.eigenvectors[:, :q], self.sample_count)

    def reconstruction(self) -> np.ndarray:
        """V diag(lambda) V^T."""
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T

    def payload_bytes(self) -> int:
        """Size of the eigenvector matrix when sent as float32."""
        return self.dim * self.rank * 4


def _check_features(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be a 2-D matrix, got shape {features.shape}")
    if features.shape[0] < 1:
        raise EmptyUserError("a spectral signature needs at least one sample")
    if not np.all(np.isfinite(features)):
        raise NumericError("features contain NaN or infinite values")
    return features


def second_moment(features: np.ndarray) -> np.ndarray:
    """Sigma = (1/n) F^T F, without mean subtraction."""
    features = _check_features(features)
    return features.T @ features / features.shape[0]


def eigen_decomposition(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Full eigendecomposition of a second-moment matrix, sorted by descending eigenvalue.

    Uses the symmetric solver on (Sigma + Sigma^T)/2 and clamps negative roundoff to zero.

    Returns:
        tuple: (eigenvalues length d, eigenvectors d x d)
    """
    sym = (sigma + sigma.T) / 2.0
    values, vectors = linalg.eigh(sym)
    order = np.argsort(values, kind="stable")[::-1]
    values = np.maximum(values[order], 0.0)
    vectors = vectors[:, order]
    # sign fix: largest-magnitude component positive
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return values, vectors * signs


def spectral_signature(features: np.ndarray, q: int) -> SpectralSignature:
    """
    Top-q eigenpairs of (1/n) F^T F.

    Args:
        features (np.ndarray): n x d feature matrix, n >= 1
        q (int): Number of eigenpairs, 1 <= q <= d

    Returns:
        SpectralSignature: The truncated spectrum

    Raises:
        RankError: If q is outside [1, d]
        NumericError: If the features are not finite
    """
    features = _check_features(features)
    d = features.shape[1]
    if not 1 <= q <= d:
        raise RankError(f"q={q} must lie in [1, d={d}]")
    values, vectors = eigen_decomposition(second_moment(features))
    return SpectralSignature(values[:q], vectors[:, :q], features.shape[0])


def select_rank(eigenvalues: np.ndarray, threshold: float, q_max: Optional[int] = None) -> int:
    """
    Number of eigenvalues strictly above `threshold`, clamped to [1, min(len, q_max)].
    """
    eigenvalues = np.asarray(eigenvalues)
    upper = eigenvalues.shape[0] if q_max is None else min(eigenvalues.shape[0], q_max)
    count = int(np.sum(eigenvalues > threshold))
    return max(1, min(count, upper))


@dataclass(frozen=True, eq=False)
class SpectralProfile:
    """
    Everything one party keeps locally about its data: the full second-moment matrix, the
    full spectrum and the rank chosen by threshold. Only eigenvectors ever leave the party.
    """
    sigma: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sample_count: int
    rank: int

    @classmethod
    def from_features(cls, features: np.ndarray, threshold: float, q_max: Optional[int] = None) -> "SpectralProfile":
        sigma = second_moment(features)
        values, vectors = eigen_decomposition(sigma)
        rank = select_rank(values, threshold, q_max)
        return cls(sigma, values, vectors, int(np.asarray(features).shape[0]), rank)

    @property
    def dim(self) -> int:
        return int(self.sigma.shape[0])

    def signature(self, q: Optional[int] = None) -> SpectralSignature:
        q = self.rank if q is None else q
        if not 1 <= q <= self.dim:
            raise RankError(f"q={q} must lie in [1, d={self.dim}]")
        return SpectralSignature(self.eigenvalues[:q], self.eigenvectors[:, :q], self.sample_count)
