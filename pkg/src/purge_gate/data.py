"""Synthetic labeled shapes used as the source domain."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from purge_gate.errors import FormatError, InvalidArgumentError
from purge_gate.tokenizer import PointCloud

SHAPES = ("sphere", "cube", "cylinder", "cross")


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    half = 0.75
    face = rng.integers(6, size=n)
    pts = rng.uniform(-half, half, size=(n, 3))
    axis, sign = face // 2, np.where(face % 2, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half
    return pts


def _cylinder(rng, n):
    r, h = 0.7, 0.9  # h is the half-height
    side, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-h, h, size=n), np.where(rng.uniform(size=n) < 0.5, -h, h))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cross(rng, n):
    a = rng.uniform(-1, 1, size=n)
    b = rng.uniform(-1, 1, size=n)
    zero = np.zeros(n)
    first = rng.uniform(size=n) < 0.5
    return np.where(first[:, None], np.stack([a, zero, b], 1), np.stack([zero, a, b], 1))


_GENERATORS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cross": _cross}


def sample_shape(name: str, n_points: int, rng: np.random.Generator, jitter: float = 0.005) -> np.ndarray:
    """Uniform surface samples of ``name`` with a random per-axis stretch and yaw."""
    pts = _GENERATORS[name](rng, n_points)
    pts = pts * rng.uniform(0.8, 1.2, size=3)
    yaw = rng.uniform(0, 2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    return pts + rng.normal(0.0, jitter, size=pts.shape)


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[str, ...] = SHAPES
    n_points: int = 512
    train_per_class: int = 200
    test_per_class: int = 50
    jitter: float = 0.005

    def __post_init__(self):
        if len(self.classes) < 2:
            raise InvalidArgumentError("need at least two classes")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise InvalidArgumentError(f"unknown shape classes {sorted(unknown)}; choose from {SHAPES}")
        if self.n_points < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise InvalidArgumentError("counts must be positive")


def make_split(spec: DatasetSpec, per_class: int, seed) -> list[PointCloud]:
    """Class-balanced, interleaved list of labeled clouds."""
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(per_class):
        for label, name in enumerate(spec.classes):
            clouds.append(PointCloud(sample_shape(name, spec.n_points, rng, spec.jitter), label))
    return clouds


def make_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[list[PointCloud], list[PointCloud]]:
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    return make_split(spec, spec.train_per_class, train_seed), make_split(spec, spec.test_per_class, test_seed)


def save_split(path, clouds: list[PointCloud]) -> None:
    """Write an ``.npz`` with ``points`` (M, N, 3) float32 and ``labels`` (M,) int64."""
    pts = np.stack([c.points for c in clouds]).astype(np.float32)
    labels = np.array([-1 if c.label is None else c.label for c in clouds], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, points=pts, labels=labels)


def load_split(path) -> list[PointCloud]:
    try:
        with np.load(Path(path)) as data:
            pts, labels = data["points"], data["labels"]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from None
    return [PointCloud(p.astype(np.float64), None if y < 0 else int(y)) for p, y in zip(pts, labels)]
