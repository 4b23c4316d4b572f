"""Point-cloud files.

Binary layout (``.pgpc``): 4-byte magic ``PGPC``, point count as little-endian
uint32, then ``count`` triples of little-endian float32.

Text layout (anything else): one ``x y z`` line per point, ``#`` comments allowed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from purge_gate.errors import FormatError
from purge_gate.tokenizer import PointCloud

MAGIC = b"PGPC"
_HEADER = struct.Struct("<4sI")


def encode_cloud(cloud: PointCloud) -> bytes:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    return _HEADER.pack(MAGIC, pts.shape[0]) + pts.tobytes()


def decode_cloud(data: bytes, label=None) -> PointCloud:
    if len(data) < _HEADER.size:
        raise FormatError("truncated point-cloud header")
    magic, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 12 * count
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {count} points, got {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, 3)
    return PointCloud(pts.astype(np.float64), label)


def _is_binary(path: Path) -> bool:
    return path.suffix.lower() in (".pgpc", ".bin")


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if _is_binary(path):
        path.write_bytes(encode_cloud(cloud))
    else:
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud(path, label=None) -> PointCloud:
    path = Path(path)
    if _is_binary(path):
        return decode_cloud(path.read_bytes(), label)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.array(rows), label)
