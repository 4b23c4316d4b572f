"""Point-cloud tokenization: farthest-point centers plus k-nearest-neighbor patches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from purge_gate.errors import InvalidArgumentError


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidArgumentError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Token:
    center: np.ndarray
    neighborhood: np.ndarray


@dataclass(frozen=True)
class TokenizedSample:
    centers: np.ndarray  # (L_t, 3)
    neighborhoods: np.ndarray  # (L_t, k, 3), center-subtracted
    source_indices: np.ndarray  # (L_t,)
    label: Optional[int] = field(default=None)

    @property
    def n_tokens(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.neighborhoods.shape[1]

    @property
    def tokens(self) -> list[Token]:
        return [Token(c, n) for c, n in zip(self.centers, self.neighborhoods)]


def farthest_point_centers(cloud: PointCloud, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point selection starting at ``seed_index``.

    Each new center maximizes its minimum distance to the centers already
    chosen. Ties go to the lowest point index; chosen points are never
    re-selected, so clouds with duplicate points still yield distinct indices.
    """
    pts = cloud.points
    n = pts.shape[0]
    if count < 1:
        raise InvalidArgumentError(f"count must be positive, got {count}")
    if count > n:
        raise InvalidArgumentError(f"cannot pick {count} centers from {n} points")
    if not 0 <= seed_index < n:
        raise InvalidArgumentError(f"seed_index {seed_index} out of range for {n} points")

    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = seed_index
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    min_d2[seed_index] = -np.inf
    for t in range(1, count):
        nxt = int(np.argmax(min_d2))
        chosen[t] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
        min_d2[chosen[: t + 1]] = -np.inf
    return chosen


def _knn_indices(points: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    d2 = np.sum((points - center) ** 2, axis=1)
    # stable sort keeps the lowest index first among equal distances
    return np.argsort(d2, kind="stable")[:k]


def knn_group(cloud: PointCloud, center_index: int, k: int) -> Token:
    n = len(cloud)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if not 0 <= center_index < n:
        raise InvalidArgumentError(f"center_index {center_index} out of range")
    center = cloud.points[center_index]
    idx = _knn_indices(cloud.points, center, k)
    return Token(center=center.copy(), neighborhood=cloud.points[idx] - center)


def tokenize(
    cloud: PointCloud,
    n_tokens: int,
    k: int,
    seed_index: int = 0,
    rng_seed: Optional[int] = None,
) -> TokenizedSample:
    """Turn ``cloud`` into ``n_tokens`` patches of ``k`` re-centered points.

    With ``rng_seed`` set, the first center is drawn from that seed instead of
    using ``seed_index``.
    """
    n = len(cloud)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if rng_seed is not None:
        seed_index = int(np.random.default_rng(rng_seed).integers(n))
    idx = farthest_point_centers(cloud, n_tokens, seed_index)
    pts = cloud.points
    centers = pts[idx]
    d2 = np.sum((centers[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    neighborhoods = pts[nn] - centers[:, None, :]
    return TokenizedSample(centers=centers, neighborhoods=neighborhoods, source_indices=idx, label=cloud.label)


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(centers (B, L, 3), neighborhoods (B, L, k, 3))``."""
    centers = np.stack([s.centers for s in samples])
    neighborhoods = np.stack([s.neighborhoods for s in samples])
    return centers, neighborhoods
