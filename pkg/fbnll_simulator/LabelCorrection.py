"""
LabelCorrection detects and repairs noisy labels against a small clean reference held by the
parameter server (PS).

The PS builds one principal subspace per class from its clean samples. Every user then
inspects each of its observed classes in two phases:

Phase 1 (class-wise): the user's class group is compared with every clean class in both
directions (PS side: clean second moment against the user's group eigenvectors; user side:
the group's second moment against the clean subspace). If exactly one clean class scores at
least tau_sim, the whole group takes that label.

Phase 2 (sample-wise): otherwise every sample of the group gets the label of the class
subspace onto which its feature vector has the largest projection.

The PS-facing calls (`CleanClassReference.server_relevance`) only receive eigenvectors. Raw
features and labels stay with the user, who makes all decisions.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fbnll_simulator.Errors import (
    ConfigError,
    IncompleteReferenceError,
    InsufficientSamplesError,
    ShapeError,
)
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.SimilarityMatrix import cross_energy, relevance
from fbnll_simulator.SpectralSignature import SpectralProfile
from fbnll_simulator.UserPartition import UserPartition

logger = logging.getLogger(__name__)

CLASS_RELABEL = "class-relabel"
CONFIRMED_CLEAN = "confirmed-clean"
SAMPLE_WISE = "sample-wise"


@dataclass(frozen=True)
class CorrectionConfig:
    """
    Attributes:
        tau_sim (float): Phase-1 similarity threshold in (0, 1)
        phase1_rank (int): Rank cap for the class-level comparison
        phase2_rank (int): Rank cap of the projection subspaces
        rank_threshold (float): Eigenvalue threshold for rank selection
    """
    tau_sim: float = 0.5
    phase1_rank: int = 10
    phase2_rank: int = 15
    rank_threshold: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.tau_sim < 1.0:
            raise ConfigError(f"tau_sim must be in (0, 1), got {self.tau_sim}")
        if self.phase1_rank < 1 or self.phase2_rank < 1:
            raise ConfigError("phase ranks must be at least 1")


@dataclass(frozen=True, eq=False)
class ClassSubspace:
    """
    Attributes:
        class_id (int): c
        basis (np.ndarray): d x l orthonormal columns Q_l^c
        eigenvalues (np.ndarray): l leading eigenvalues of the clean class second moment
        sample_count (int): n_s^c
    """
    class_id: int
    basis: np.ndarray
    eigenvalues: np.ndarray
    sample_count: int

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    def projection_norm(self, z: np.ndarray) -> float:
        """|| Q Q^T z ||_2."""
        return float(np.linalg.norm(self.basis @ (self.basis.T @ z)))


class CleanClassReference:
    """
    The PS-side view of the clean validation data: one spectral profile per class.

    Args:
        profiles (Sequence[SpectralProfile]): Clean class profiles, index = class id
        phase2_rank (int): Rank cap of the subspaces shared with users
    """

    def __init__(self, profiles: Sequence[SpectralProfile], phase2_rank: int):
        self._profiles: List[SpectralProfile] = list(profiles)
        self.subspaces: List[ClassSubspace] = []
        for c, profile in enumerate(self._profiles):
            l = max(1, min(phase2_rank, profile.rank, profile.dim))
            self.subspaces.append(ClassSubspace(
                c, profile.eigenvectors[:, :l], profile.eigenvalues[:l], profile.sample_count
            ))

    @property
    def num_classes(self) -> int:
        return len(self._profiles)

    @property
    def dim(self) -> int:
        return self._profiles[0].dim

    def class_rank(self, c: int) -> int:
        return self._profiles[c].rank

    def basis(self, c: int, q: int) -> np.ndarray:
        """Top-q clean eigenvectors of class c, as shared with users."""
        return self._profiles[c].eigenvectors[:, :q]

    def server_relevance(self, c: int, user_vectors: np.ndarray) -> float:
        """
        r(c, c~): the clean class-c second moment against the user's uploaded eigenvectors.
        Takes no labels and no raw user features.
        """
        q = user_vectors.shape[1]
        profile = self._profiles[c]
        return relevance(profile.eigenvalues[:q], cross_energy(profile.sigma, user_vectors)).value

    def broadcast_bytes(self) -> int:
        return sum(s.basis.size * 4 for s in self.subspaces)


def build_class_subspaces(
    server_clean: LabeledDataset,
    l: int,
    num_classes: int,
    rank_threshold: float = 1e-6,
) -> CleanClassReference:
    """
    Computes the per-class second moments of the clean server data and keeps the top-l
    eigenvectors of each class (fewer if rank selection finds fewer above threshold).

    Raises:
        IncompleteReferenceError: If some class has fewer than two clean samples
    """
    profiles = []
    for c in range(num_classes):
        members = np.flatnonzero(server_clean.observed_labels == c)
        if members.size < 2:
            raise IncompleteReferenceError(
                f"clean reference has {members.size} samples of class {c}, at least 2 required"
            )
        profiles.append(SpectralProfile.from_features(server_clean.features[members], rank_threshold))
    reference = CleanClassReference(profiles, l)
    logger.info(
        "Built %d clean class subspaces, ranks %s", num_classes, [s.rank for s in reference.subspaces]
    )
    return reference


def phase1_class_similarity(
    user_class_features: np.ndarray,
    reference: CleanClassReference,
    phase1_rank: int,
    rank_threshold: float = 1e-6,
) -> np.ndarray:
    """
    Averaged two-way similarity between one local class group and every clean class.

    Returns:
        np.ndarray: Length-C vector of (r(c, c~) + r(c~, c)) / 2

    Raises:
        InsufficientSamplesError: If the group has fewer than two samples
    """
    return _phase1_scores(user_class_features, reference, phase1_rank, rank_threshold)[0]


def _phase1_scores(
    user_class_features: np.ndarray,
    reference: CleanClassReference,
    phase1_rank: int,
    rank_threshold: float,
) -> Tuple[np.ndarray, int]:
    if user_class_features.shape[0] < 2:
        raise InsufficientSamplesError("a class group needs at least two samples for Phase 1")
    if user_class_features.shape[1] != reference.dim:
        raise ShapeError(f"class features have dimension {user_class_features.shape[1]}, reference {reference.dim}")
    local = SpectralProfile.from_features(user_class_features, rank_threshold)
    q = max(1, min(phase1_rank, local.rank, local.dim))
    uploaded = local.eigenvectors[:, :q]

    scores = np.zeros(reference.num_classes)
    for c in range(reference.num_classes):
        r_server = reference.server_relevance(c, uploaded)
        r_user = relevance(local.eigenvalues[:q], cross_energy(local.sigma, reference.basis(c, q))).value
        scores[c] = (r_server + r_user) / 2.0
    return scores, q


@dataclass(frozen=True)
class Phase1Decision:
    """
    Attributes:
        disposition (str): CLASS_RELABEL, CONFIRMED_CLEAN or SAMPLE_WISE
        target (int): Class the group is relabelled to (-1 for SAMPLE_WISE)
    """
    disposition: str
    target: int = -1


def phase1_decide(scores: np.ndarray, tau_sim: float, current_label: int) -> Phase1Decision:
    """Unique exceedance of tau_sim -> relabel (or confirm); none or several -> Phase 2."""
    exceed = np.flatnonzero(np.asarray(scores) >= tau_sim)
    if exceed.size != 1:
        return Phase1Decision(SAMPLE_WISE)
    target = int(exceed[0])
    if target == current_label:
        return Phase1Decision(CONFIRMED_CLEAN, target)
    return Phase1Decision(CLASS_RELABEL, target)


@dataclass(frozen=True)
class Phase2Outcome:
    """
    Attributes:
        label (int): Argmax class, smallest index on ties
        projections (np.ndarray): || Q Q^T z || for every class
        ambiguous (bool): True when every projection is zero
    """
    label: int
    projections: np.ndarray
    ambiguous: bool


def phase2_project(z: np.ndarray, subspaces: Sequence[ClassSubspace]) -> Phase2Outcome:
    """
    Assigns z to the class whose principal subspace captures most of it.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ShapeError("sample features must be finite")
    projections = np.array([s.projection_norm(z) for s in subspaces])
    best = int(np.argmax(projections))
    return Phase2Outcome(best, projections, bool(projections[best] == 0.0))


@dataclass
class ClassDisposition:
    observed_class: int
    sample_count: int
    scores: Optional[List[float]]
    disposition: str
    target: int
    upload_rank: int = 0


@dataclass
class CorrectionReport:
    """
    What correction did for one user: the disposition of every inspected class group and
    every label change.
    """
    user: int = -1
    classes: List[ClassDisposition] = field(default_factory=list)
    relabels: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    ambiguous_ids: List[int] = field(default_factory=list)
    sample_dispositions: Dict[int, str] = field(default_factory=dict)

    @property
    def detected(self) -> int:
        """Samples whose label the procedure changed."""
        return len(self.relabels)

    @property
    def confirmed(self) -> int:
        return sum(c.sample_count for c in self.classes if c.disposition == CONFIRMED_CLEAN)

    def changed_ids(self) -> List[int]:
        return sorted(self.relabels)

    def upload_bytes(self, dim: int) -> int:
        """Eigenvectors sent to the PS for Phase 1, as float32."""
        return sum(c.upload_rank for c in self.classes) * dim * 4

    def summary(self) -> dict:
        return {
            "detected": self.detected,
            "class_relabelled": sum(1 for sid in self.relabels if self.sample_dispositions[sid] == CLASS_RELABEL),
            "sample_relabelled": sum(1 for sid in self.relabels if self.sample_dispositions[sid] == SAMPLE_WISE),
            "confirmed": self.confirmed,
            "ambiguous": len(self.ambiguous_ids),
        }

    def to_dict(self) -> dict:
        return {
            "user": self.user,
            "classes": [vars(c) for c in self.classes],
            "relabels": {
                str(sid): {"from": old, "to": new, "phase": self.sample_dispositions[sid]}
                for sid, (old, new) in sorted(self.relabels.items())
            },
            "ambiguous_ids": self.ambiguous_ids,
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorrectionReport":
        """Restores a report written by to_dict (per-sample dispositions of unchanged samples are not kept)."""
        report = cls(user=int(data["user"]))
        report.classes = [ClassDisposition(**c) for c in data["classes"]]
        for sid, change in data["relabels"].items():
            report.relabels[int(sid)] = (int(change["from"]), int(change["to"]))
            report.sample_dispositions[int(sid)] = change["phase"]
        report.ambiguous_ids = [int(i) for i in data["ambiguous_ids"]]
        return report


def correct_user(
    ds: LabeledDataset, reference: CleanClassReference, cfg: CorrectionConfig, user: int = -1
) -> Tuple[LabeledDataset, CorrectionReport]:
    """
    Runs both phases over every observed class of one user, in ascending class order.

    Groups are formed from the labels as they were on entry; a Phase-1 relabel does not
    merge the group into a class processed later in the same pass.

    Args:
        ds (LabeledDataset): The user's data in the correction feature space
        reference (CleanClassReference): Clean subspaces shared by the PS
        cfg (CorrectionConfig): Threshold and ranks

    Returns:
        tuple: (dataset with corrected observed labels, report)

    Raises:
        ShapeError: If ds and the reference live in different feature spaces
    """
    report = CorrectionReport(user=user)
    if ds.n == 0:
        return ds, report
    if ds.dim != reference.dim:
        raise ShapeError(f"user features have dimension {ds.dim}, clean subspaces {reference.dim}")

    original = ds.observed_labels
    labels = original.copy()
    for c_obs in np.unique(original):
        c_obs = int(c_obs)
        members = np.flatnonzero(original == c_obs)
        scores, q = None, 0
        if members.size < 2:
            logger.warning("user %d: class %d has %d sample(s), skipping Phase 1", user, c_obs, members.size)
            decision = Phase1Decision(SAMPLE_WISE)
        else:
            scores, q = _phase1_scores(ds.features[members], reference, cfg.phase1_rank, cfg.rank_threshold)
            decision = phase1_decide(scores, cfg.tau_sim, c_obs)
            logger.debug("user %d class %d: scores %s -> %s", user, c_obs, np.round(scores, 4).tolist(), decision)

        report.classes.append(ClassDisposition(
            c_obs, int(members.size), None if scores is None else scores.tolist(),
            decision.disposition, decision.target, q,
        ))

        if decision.disposition != SAMPLE_WISE:
            labels[members] = decision.target
            for idx in members:
                report.sample_dispositions[int(ds.sample_ids[idx])] = decision.disposition
        else:
            for idx in members:
                sid = int(ds.sample_ids[idx])
                outcome = phase2_project(ds.features[idx], reference.subspaces)
                report.sample_dispositions[sid] = SAMPLE_WISE
                if outcome.ambiguous:
                    report.ambiguous_ids.append(sid)
                    logger.warning("user %d: sample %d projects onto no class subspace, label kept", user, sid)
                    continue
                labels[idx] = outcome.label

        for idx in members:
            if labels[idx] != original[idx]:
                report.relabels[int(ds.sample_ids[idx])] = (int(original[idx]), int(labels[idx]))

    return ds.with_observed_labels(labels), report


def correct_partition(
    partition: UserPartition,
    reference: CleanClassReference,
    cfg: CorrectionConfig,
    features: Optional[Sequence[LabeledDataset]] = None,
) -> Tuple[UserPartition, List[CorrectionReport]]:
    """
    Corrects every user. When `features` is given (the users mapped into the correction
    feature space, same row order), decisions are made there and the new labels are written
    back onto the partition's own datasets.
    """
    mapped = list(partition.users) if features is None else list(features)
    if len(mapped) != partition.num_users:
        raise ShapeError("one mapped dataset per user is required")
    users, reports = [], []
    for k, (user, view) in enumerate(zip(partition.users, mapped)):
        if view.n != user.n or not np.array_equal(view.sample_ids, user.sample_ids):
            raise ShapeError(f"user {k}: mapped dataset is not aligned with the partition")
        corrected, report = correct_user(view, reference, cfg, user=k)
        users.append(user.with_observed_labels(corrected.observed_labels))
        reports.append(report)
    logger.info("Label correction changed %d labels across %d users",
                sum(r.detected for r in reports), partition.num_users)
    return partition.with_users(users), reports
