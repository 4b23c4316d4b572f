"""Synthetic test-time distribution shifts for point clouds.

These are desk-scale analogues of the usual corruption families (noise,
density, transformation). They are not numerically compatible with any
published benchmark generator; the exact transforms are listed in
:data:`CORRUPTION_TABLE` and in ``purge-gate corruptions --describe``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from purge_gate.errors import InvalidArgumentError
from purge_gate.tokenizer import PointCloud


class Kind(str, enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    BACKGROUND = "background"
    IMPULSE = "impulse"
    UPSAMPLING = "upsampling"
    DENSITY_DEC = "density_dec"
    DENSITY_INC = "density_inc"
    CUTOUT = "cutout"
    ROTATION = "rotation"
    SHEAR = "shear"
    DISTORTION = "distortion"


NOISE_KINDS = (Kind.UNIFORM, Kind.GAUSSIAN, Kind.IMPULSE)
DENSITY_KINDS = (Kind.DENSITY_DEC, Kind.DENSITY_INC, Kind.CUTOUT, Kind.UPSAMPLING)
TRANSFORM_KINDS = (Kind.ROTATION, Kind.SHEAR, Kind.DISTORTION)

MAX_SEVERITY = 5

CORRUPTION_TABLE = {
    "none": {"family": "none", "transform": "identity", "point_count": "N"},
    "uniform": {
        "family": "noise",
        "transform": "add U(-0.02*s, 0.02*s) to every coordinate",
        "point_count": "N",
    },
    "gaussian": {
        "family": "noise",
        "transform": "add N(0, (0.01*s)^2) to every coordinate",
        "point_count": "N",
    },
    "impulse": {
        "family": "noise",
        "transform": "displace ceil(N*0.05*s) random points by +-0.1 per axis",
        "point_count": "N",
    },
    "background": {
        "family": "noise",
        "transform": "append 8*s points uniform in the bounding box scaled by 1.1 about its center",
        "point_count": "N + 8*s",
    },
    "upsampling": {
        "family": "density",
        "transform": "duplicate ceil(N*0.1*s) random points with N(0, 0.01^2) jitter",
        "point_count": "N + min(N, ceil(N*0.1*s))",
    },
    "density_dec": {
        "family": "density",
        "transform": "drop the ceil(N*0.06*s) nearest neighbors of one random point",
        "point_count": "N - min(N-1, ceil(N*0.06*s))",
    },
    "density_inc": {
        "family": "density",
        "transform": "duplicate the ceil(N*0.06*s) nearest neighbors of one random point with N(0, 0.005^2) jitter",
        "point_count": "N + min(N, ceil(N*0.06*s))",
    },
    "cutout": {
        "family": "density",
        "transform": "remove s patches, each the 16 nearest remaining neighbors of a random remaining point",
        "point_count": "max(1, N - 16*s)",
    },
    "rotation": {
        "family": "transformation",
        "transform": "rotate by s*7.5 degrees about a uniformly random axis through the origin",
        "point_count": "N",
    },
    "shear": {
        "family": "transformation",
        "transform": "multiply by I plus off-diagonal entries drawn from U(-0.05*s, 0.05*s)",
        "point_count": "N",
    },
    "distortion": {
        "family": "transformation",
        "transform": "add a smooth warp: 5 Gaussian kernels (width 0.2) at random points, random directions, amplitude 0.05*s",
        "point_count": "N",
    },
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: Kind = Kind.NONE
    severity: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Kind(self.kind))
        except ValueError:
            raise InvalidArgumentError(f"unknown corruption kind {self.kind!r}") from None
        if isinstance(self.severity, bool) or int(self.severity) != self.severity:
            raise InvalidArgumentError(f"severity must be an integer, got {self.severity!r}")
        if not 1 <= self.severity <= MAX_SEVERITY:
            raise InvalidArgumentError(f"severity must be in 1..{MAX_SEVERITY}, got {self.severity}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise InvalidArgumentError("rng_seed must fit in an unsigned 64-bit integer")


def _knn_patch(points, center, size):
    d2 = np.sum((points - center) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:size]


def _random_axis(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def rotation_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` (normalized here) by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if not norm > 0:
        raise InvalidArgumentError("rotation axis must be non-zero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def apply_corruption(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    kind, s = spec.kind, spec.severity
    if kind is Kind.NONE:
        return cloud
    rng = np.random.default_rng(int(spec.rng_seed))
    pts = cloud.points
    n = pts.shape[0]

    if kind is Kind.UNIFORM:
        out = pts + rng.uniform(-0.02 * s, 0.02 * s, size=pts.shape)
    elif kind is Kind.GAUSSIAN:
        out = pts + rng.normal(0.0, 0.01 * s, size=pts.shape)
    elif kind is Kind.IMPULSE:
        m = min(n, math.ceil(n * 0.05 * s))
        idx = rng.choice(n, size=m, replace=False)
        out = pts.copy()
        out[idx] += 0.1 * rng.choice([-1.0, 1.0], size=(m, 3))
    elif kind is Kind.BACKGROUND:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * 1.1
        extra = rng.uniform(mid - half, mid + half, size=(8 * s, 3))
        out = np.concatenate([pts, extra])
    elif kind is Kind.UPSAMPLING:
        m = min(n, math.ceil(n * 0.1 * s))
        idx = rng.choice(n, size=m, replace=False)
        out = np.concatenate([pts, pts[idx] + rng.normal(0.0, 0.01, size=(m, 3))])
    elif kind is Kind.DENSITY_DEC:
        m = min(n - 1, math.ceil(n * 0.06 * s))
        drop = _knn_patch(pts, pts[rng.integers(n)], m)
        out = np.delete(pts, drop, axis=0)
    elif kind is Kind.DENSITY_INC:
        m = min(n, math.ceil(n * 0.06 * s))
        idx = _knn_patch(pts, pts[rng.integers(n)], m)
        out = np.concatenate([pts, pts[idx] + rng.normal(0.0, 0.005, size=(m, 3))])
    elif kind is Kind.CUTOUT:
        out = pts
        for _ in range(s):
            if out.shape[0] <= 1:
                break
            m = min(out.shape[0] - 1, 16)
            drop = _knn_patch(out, out[rng.integers(out.shape[0])], m)
            out = np.delete(out, drop, axis=0)
    elif kind is Kind.ROTATION:
        rot = rotation_matrix(_random_axis(rng), math.radians(7.5 * s))
        out = pts @ rot.T
    elif kind is Kind.SHEAR:
        shear = np.eye(3)
        off = ~np.eye(3, dtype=bool)
        shear[off] = rng.uniform(-0.05 * s, 0.05 * s, size=6)
        out = pts @ shear.T
    elif kind is Kind.DISTORTION:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        centers = rng.uniform(lo, hi, size=(5, 3))
        dirs = rng.standard_normal((5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        d2 = np.sum((pts[:, None, :] - centers[None]) ** 2, axis=-1)
        weights = np.exp(-d2 / (2 * 0.2**2))
        out = pts + 0.05 * s * weights @ dirs
    else:  # pragma: no cover - Kind is closed
        raise InvalidArgumentError(f"unhandled corruption {kind}")
    return PointCloud(out, cloud.label)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean nearest-neighbor distance in both directions."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


def describe() -> dict:
    return {
        "severity_range": [1, MAX_SEVERITY],
        "kinds": CORRUPTION_TABLE,
    }
