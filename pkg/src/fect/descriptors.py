"""Deterministic feature extractors and the binary feature cache.

Three fixed extractors stand in for trained backbones:

* ``extract_cell_descriptor``: 14-dim histogram/moment summary of a 32 x 32
  window around a nucleus.
* ``extract_tissue_descriptor``: 27-dim intensity/shape summary of the whole
  masked region.
* ``PatchEmbedder``: seeded random projection of a 64 x 64 patch to 32 dims.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import connected_components, crop_patch, to_gray, trace_contour
from .numkit import SeededRng, ShapeError

__all__ = [
    "MODALITIES",
    "FeatureVector",
    "ExtractorSpec",
    "CELL_WINDOW",
    "CELL_DIM",
    "TISSUE_DIM",
    "EDGE_PATCH",
    "EDGE_DIM",
    "extract_cell_descriptor",
    "cell_tokens",
    "extract_tissue_descriptor",
    "PatchEmbedder",
    "write_feature_cache",
    "read_feature_cache",
    "FeatureCacheError",
]

MODALITIES = ("cell", "tissue", "edge")
CELL_WINDOW = 32
CELL_DIM = 14
TISSUE_DIM = 27
EDGE_PATCH = 64
EDGE_DIM = 32
MAX_CELLS = 256


@dataclass
class FeatureVector:
    modality: str
    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str
    patch_size: int
    output_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.output_dim <= 0:
            raise ValueError("output dim must be positive")


CELL_SPEC = ExtractorSpec("cell-histogram-moments", CELL_WINDOW, CELL_DIM)
TISSUE_SPEC = ExtractorSpec("tissue-shape", 0, TISSUE_DIM)


def _window_features(win: np.ndarray) -> np.ndarray:
    hist = np.histogram(win, bins=8, range=(0.0, 256.0))[0] / win.size
    mean = win.mean()
    var = win.var()
    dark = win < mean
    m00 = dark.sum()
    moments = np.zeros(4)
    if m00:
        rr, cc = np.nonzero(dark)
        dr, dc = rr - rr.mean(), cc - cc.mean()
        # central moments mu20, mu11, mu02, mu22 per dark pixel
        moments = np.array([(dr * dr).mean(), (dr * dc).mean(), (dc * dc).mean(), (dr * dr * dc * dc).mean()])
    return np.concatenate([hist, [mean, var], moments])


def extract_cell_descriptor(image: np.ndarray, centroid, window: int = CELL_WINDOW) -> FeatureVector:
    """Histogram (8 bins), mean, variance and four central moments of the dark pixels.

    The window is thresholded at its own mean intensity; moments are
    ``mu20, mu11, mu02, mu22`` normalised by the dark-pixel count.
    """
    gray = to_gray(image)
    r, c = int(centroid[0]), int(centroid[1])
    if not (0 <= r < gray.shape[0] and 0 <= c < gray.shape[1]):
        raise ValueError(f"centroid {centroid} outside image")
    return FeatureVector("cell", _window_features(crop_patch(gray, (r, c), window)))


# hist | mean | var | mu20 mu11 mu02 | mu22, brought to O(1) for the aggregator
CELL_TOKEN_SCALE = np.concatenate([
    np.ones(8), [1 / 255.0, 1 / 255.0 ** 2],
    np.full(3, 1.0 / (CELL_WINDOW ** 2 / 12.0)), [1.0 / (CELL_WINDOW ** 2 / 12.0) ** 2],
])


def cell_tokens(image: np.ndarray, centroids, window: int = CELL_WINDOW,
                max_cells: int = MAX_CELLS, seed: int = 0) -> np.ndarray:
    """Scaled cell descriptors for up to ``max_cells`` centroids (seeded subsample)."""
    cents = np.asarray(centroids, dtype=np.int64).reshape(-1, 2)
    if len(cents) > max_cells:
        keep = np.sort(SeededRng(seed).permutation(len(cents))[:max_cells])
        cents = cents[keep]
    gray = to_gray(image)
    if len(cents) == 0:
        return np.zeros((0, CELL_DIM))
    toks = np.stack([extract_cell_descriptor(gray, rc, window).values for rc in cents])
    return toks * CELL_TOKEN_SCALE


def _hu_moments(mask: np.ndarray) -> np.ndarray:
    rr, cc = np.nonzero(mask)
    m00 = float(len(rr))
    dr, dc = rr - rr.mean(), cc - cc.mean()

    def eta(p, q):
        return float(np.sum(dr ** p * dc ** q)) / m00 ** (1 + (p + q) / 2)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    hu = np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2,
        a ** 2 + b ** 2,
        (n30 - 3 * n12) * a * (a ** 2 - 3 * b ** 2) + (3 * n21 - n03) * b * (3 * a ** 2 - b ** 2),
        (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b,
        (3 * n21 - n03) * a * (a ** 2 - 3 * b ** 2) - (n30 - 3 * n12) * b * (3 * a ** 2 - b ** 2),
    ])
    # log-magnitude keeps the seven invariants on comparable scales
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = -np.sign(hu) * np.log10(np.abs(hu))
    return np.where(hu == 0, 0.0, logs)


def extract_tissue_descriptor(image: np.ndarray, mask: np.ndarray, connectivity: int = 8) -> FeatureVector:
    """16-bin masked histogram, area fraction, component count, mean component
    area, outer-perimeter/area ratio and seven log-scaled Hu invariants."""
    gray = to_gray(image)
    fg = np.asarray(mask) > 0
    if not fg.any():
        return FeatureVector("tissue", np.zeros(TISSUE_DIM), degenerate=True)
    hist = np.histogram(gray[fg], bins=16, range=(0.0, 256.0))[0] / fg.sum()
    labels, count = connected_components(fg, connectivity)
    area = float(fg.sum())
    perimeter = 0.0
    for k in range(1, count + 1):
        perimeter += trace_contour(labels == k, k).perimeter
    values = np.concatenate([
        hist,
        [area / fg.size, count, area / count, perimeter / area],
        _hu_moments(fg),
    ])
    return FeatureVector("tissue", values)


class PatchEmbedder:
    """``y = P @ flatten(patch) / 255`` with ``P ~ N(0, 1) / sqrt(4096)``, seeded."""

    def __init__(self, seed: int = 0, dim: int = EDGE_DIM, patch: int = EDGE_PATCH):
        self.seed = seed
        self.dim = dim
        self.patch = patch
        self.spec = ExtractorSpec("random-projection", patch, dim, seed)
        n = patch * patch
        self.projection = SeededRng(seed).normal(size=(dim, n)) / np.sqrt(n)

    def embed(self, patch: np.ndarray) -> FeatureVector:
        return FeatureVector("edge", self.embed_many(np.asarray(patch)[None])[0])

    def embed_many(self, patches: np.ndarray) -> np.ndarray:
        p = np.asarray(patches, dtype=np.float64)
        if p.ndim == 4:
            p = p.mean(axis=3)
        if p.ndim != 3 or p.shape[1:] != (self.patch, self.patch):
            raise ShapeError(f"expected {self.patch}x{self.patch} patches, got {p.shape[1:]}")
        return (p.reshape(len(p), -1) / 255.0) @ self.projection.T


# ------------------------------------------------------------- feature cache

_CACHE_MAGIC = b"FECTFEAT"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sHBII")


class FeatureCacheError(ValueError):
    pass


def write_feature_cache(path, modality: str, features: np.ndarray) -> Path:
    """Little-endian: magic, u16 version, u8 modality, u32 dim, u32 count, f32 rows."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError("feature matrix must be 2-D")
    count, dim = feats.shape
    path = Path(path)
    header = _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, MODALITIES.index(modality), dim, count)
    path.write_bytes(header + feats.astype("<f4").tobytes())
    return path


def read_feature_cache(path) -> tuple[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FeatureCacheError(f"feature cache {path} not found")
    data = path.read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise FeatureCacheError(f"{path}: truncated header")
    magic, version, mod, dim, count = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise FeatureCacheError(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION or mod >= len(MODALITIES):
        raise FeatureCacheError(f"{path}: unsupported version {version} / modality {mod}")
    body = data[_CACHE_HEADER.size:]
    if len(body) != 4 * dim * count:
        raise FeatureCacheError(f"{path}: expected {count}x{dim} floats, found {len(body) // 4}")
    feats = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, dim)
    return MODALITIES[mod], feats
