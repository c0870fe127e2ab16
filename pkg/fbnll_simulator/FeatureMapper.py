"""
FeatureMapper turns raw samples into the d-dimensional representations every spectral
stage works on. Mappers never look at labels.

Three kinds are supported:
- hog: Histogram of Oriented Gradients on 32x32 RGB images (CIFAR-10 layout)
- embedding_file: Precomputed embeddings looked up by sample id
- identity: Features are used as they are (synthetic data, already-embedded data)

Embedding file layout (little-endian):
    b"FBNL" | u32 version=1 | u32 n | u32 d | n*d float32 (row-major) | n u32 ids | n u8 labels
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from fbnll_simulator.Errors import AlignmentError, ConfigError, MalformedFileError, ShapeError
from fbnll_simulator.LabeledDataset import LabeledDataset
from fbnll_simulator.utils import get_file_path

logger = logging.getLogger(__name__)

MAPPER_KINDS = ("hog", "embedding_file", "identity")
EMBEDDING_MAGIC = b"FBNL"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class HogParams:
    """
    HoG configuration. The defaults give 3x3 blocks of 2x2 cells with 9 bins, d = 324.

    Attributes:
        image_size (int): Side length of the square input image
        channels (int): Colour planes stored plane by plane (R, G, B)
        cell_size (int): Pixels per cell side
        block_cells (int): Cells per block side
        block_stride (int): Block stride in cells
        orientations (int): Unsigned orientation bins over [0, 180) degrees
        eps (float): Block L2 normalisation epsilon
    """
    image_size: int = 32
    channels: int = 3
    cell_size: int = 8
    block_cells: int = 2
    block_stride: int = 1
    orientations: int = 9
    eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.cell_size:
            raise ConfigError("image_size must be a multiple of cell_size")
        if self.channels not in (1, 3):
            raise ConfigError("HoG supports 1 (gray) or 3 (RGB) channels")
        if self.block_cells > self.cells_per_side:
            raise ConfigError("a block cannot be larger than the cell grid")

    @property
    def input_dim(self) -> int:
        return self.channels * self.image_size * self.image_size

    @property
    def cells_per_side(self) -> int:
        return self.image_size // self.cell_size

    @property
    def blocks_per_side(self) -> int:
        return (self.cells_per_side - self.block_cells) // self.block_stride + 1

    @property
    def output_dim(self) -> int:
        return self.blocks_per_side ** 2 * self.block_cells ** 2 * self.orientations


def hog_descriptors(images: np.ndarray, params: HogParams) -> np.ndarray:
    """
    Computes HoG descriptors for a batch of flattened images.

    Grayscale is 0.299 R + 0.587 G + 0.114 B; gradients are centred differences (zero on
    the border rows/columns); every pixel votes its gradient magnitude into one unsigned
    orientation bin with no interpolation between bins or cells; each block is L2-normalised
    as v / sqrt(|v|^2 + eps^2) with no clipping.

    Args:
        images (np.ndarray): n x (channels * size * size) raw pixel rows
        params (HogParams): Descriptor layout

    Returns:
        np.ndarray: n x params.output_dim descriptors
    """
    n = images.shape[0]
    s = params.image_size
    planes = images.reshape(n, params.channels, s, s).astype(np.float64)
    if params.channels == 3:
        gray = 0.299 * planes[:, 0] + 0.587 * planes[:, 1] + 0.114 * planes[:, 2]
    else:
        gray = planes[:, 0]

    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :, 1:-1] = gray[:, :, 2:] - gray[:, :, :-2]
    gy[:, 1:-1, :] = gray[:, 2:, :] - gray[:, :-2, :]
    magnitude = np.hypot(gx, gy)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.minimum((angle / (180.0 / params.orientations)).astype(np.int64), params.orientations - 1)

    cells = params.cells_per_side
    cs = params.cell_size
    hist = np.zeros((n, cells, cells, params.orientations))
    for b in range(params.orientations):
        votes = np.where(bins == b, magnitude, 0.0)
        hist[..., b] = votes.reshape(n, cells, cs, cells, cs).sum(axis=(2, 4))

    bc = params.block_cells
    blocks = []
    for by in range(params.blocks_per_side):
        for bx in range(params.blocks_per_side):
            y0 = by * params.block_stride
            x0 = bx * params.block_stride
            block = hist[:, y0:y0 + bc, x0:x0 + bc, :].reshape(n, -1)
            norm = np.sqrt(np.sum(block ** 2, axis=1, keepdims=True) + params.eps ** 2)
            blocks.append(block / norm)
    return np.concatenate(blocks, axis=1)


def write_embedding_file(path: str, features: np.ndarray, sample_ids: np.ndarray, labels: np.ndarray) -> None:
    """Writes embeddings in the FBNL binary layout."""
    features = np.asarray(features, dtype="<f4")
    n, d = features.shape
    ids = np.asarray(sample_ids, dtype="<u4")
    lab = np.asarray(labels, dtype=np.uint8)
    if ids.shape != (n,) or lab.shape != (n,):
        raise ShapeError("sample_ids and labels must have one entry per feature row")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, n, d))
        f.write(features.tobytes(order="C"))
        f.write(ids.tobytes())
        f.write(lab.tobytes())


def read_embedding_file(path: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Reads an FBNL embedding file.

    Returns:
        tuple: (features n x d float64, sample ids, labels)

    Raises:
        MalformedFileError: On a bad magic, unsupported version or wrong length
    """
    abs_path = get_file_path(path, "embedding file")
    with open(abs_path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise MalformedFileError(f"{abs_path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(blob, 0)
    if magic != EMBEDDING_MAGIC:
        raise MalformedFileError(f"{abs_path}: bad magic {magic!r}")
    if version != EMBEDDING_VERSION:
        raise MalformedFileError(f"{abs_path}: unsupported version {version}")
    expected = _HEADER.size + n * d * 4 + n * 4 + n
    if len(blob) != expected:
        raise MalformedFileError(f"{abs_path}: {len(blob)} bytes, expected {expected} for n={n}, d={d}")

    offset = _HEADER.size
    features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += n * d * 4
    ids = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += n * 4
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    return features.astype(np.float64), ids.astype(np.int64), labels.astype(np.int64)


def load_embedding_dataset(path: str) -> LabeledDataset:
    """Uses an embedding file as a clean dataset source (observed = true = stored labels)."""
    features, ids, labels = read_embedding_file(path)
    logger.info("Loaded %d embeddings of dimension %d from %s", features.shape[0], features.shape[1], path)
    return LabeledDataset(features, labels, labels, ids)


@dataclass
class FeatureMapper:
    """
    The feature mapping Phi.

    Attributes:
        kind (str): One of MAPPER_KINDS
        hog (HogParams): Parameters used when kind == "hog"
        embedding_path (str): File read when kind == "embedding_file"
        input_dim (int): Expected raw dimension for identity mappers (None: any)
    """
    kind: str = "identity"
    hog: HogParams = field(default_factory=HogParams)
    embedding_path: Optional[str] = None
    input_dim: Optional[int] = None
    _table: Optional[Tuple[np.ndarray, Dict[int, int]]] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in MAPPER_KINDS:
            raise ConfigError(f"unknown feature mapper '{self.kind}', choose from {MAPPER_KINDS}")
        if self.kind == "embedding_file" and not self.embedding_path:
            raise ConfigError("embedding_file mapper needs an embedding path")

    @property
    def output_dim(self) -> Optional[int]:
        if self.kind == "hog":
            return self.hog.output_dim
        if self.kind == "embedding_file":
            return self._embedding_table()[0].shape[1]
        return self.input_dim

    def _embedding_table(self) -> Tuple[np.ndarray, Dict[int, int]]:
        if self._table is None:
            features, ids, _ = read_embedding_file(self.embedding_path)
            row_of = {int(i): r for r, i in enumerate(ids)}
            if len(row_of) != len(ids):
                raise AlignmentError(f"{os.path.abspath(self.embedding_path)}: duplicate sample ids")
            self._table = (features, row_of)
        return self._table

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "hog":
            out["hog"] = vars(self.hog).copy()
        if self.kind == "embedding_file":
            out["path"] = self.embedding_path
        return out


def map_features(mapper: FeatureMapper, ds: LabeledDataset) -> LabeledDataset:
    """
    Replaces the features of `ds` by their mapped representation. Labels and ids are kept.

    Raises:
        ShapeError: If the raw dimension does not match what the mapper expects
        AlignmentError: If an embedding is missing for some sample id
    """
    if mapper.kind == "identity":
        if mapper.input_dim is not None and ds.dim != mapper.input_dim:
            raise ShapeError(f"expected {mapper.input_dim}-dimensional features, got {ds.dim}")
        return ds

    if mapper.kind == "hog":
        if ds.dim != mapper.hog.input_dim:
            raise ShapeError(f"HoG expects {mapper.hog.input_dim} raw values per sample, got {ds.dim}")
        return ds.with_features(hog_descriptors(ds.features, mapper.hog).reshape(ds.n, mapper.hog.output_dim))

    features, row_of = mapper._embedding_table()
    missing = [int(i) for i in ds.sample_ids if int(i) not in row_of]
    if missing:
        raise AlignmentError(
            f"{len(missing)} of {ds.n} sample ids have no embedding (first: {missing[0]})"
        )
    rows = np.array([row_of[int(i)] for i in ds.sample_ids], dtype=np.int64)
    return ds.with_features(features[rows].reshape(ds.n, features.shape[1]))
