"""PGW1 weights container.

Layout, all little-endian::

    b"PGW1"  u16 version  u32 config_len  config_json (UTF-8)
    u32 n_tensors
    repeated: u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 payload

Model parameters and BatchNorm buffers use their ``ModelWeights`` names;
token-purging source statistics travel as ``pg.*`` tensors.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from purge_gate.errors import FormatError, ShapeMismatchError
from purge_gate.model.config import ModelConfig
from purge_gate.model.weights import ModelWeights, buffer_shapes, param_shapes

MAGIC = b"PGW1"
VERSION = 1


def encode_weights(weights: ModelWeights) -> bytes:
    out = io.BytesIO()
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, len(cfg)))
    out.write(cfg)
    tensors = {**weights.params, **weights.buffers, **weights.extras}
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        out.write(struct.pack("<HB", len(raw), arr.ndim))
        out.write(raw)
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated weights file at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(data: bytes, expected: Optional[ModelConfig] = None) -> ModelWeights:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, cfg_len = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version} (this build reads {VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name_len, rank = r.unpack("<HB")
        name = r.take(name_len).decode()
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor")

    target = expected or config
    params, buffers, extras = {}, {}, {}
    for group, shapes in ((params, param_shapes(target)), (buffers, buffer_shapes(target))):
        for name, shape in shapes.items():
            if name not in tensors:
                raise FormatError(f"weights file lacks tensor {name!r}")
            arr = tensors.pop(name)
            if arr.shape != shape:
                raise ShapeMismatchError(name, shape, arr.shape)
            group[name] = arr
    for name in list(tensors):
        if name.startswith("pg."):
            extras[name] = tensors.pop(name)
    if tensors:
        raise FormatError(f"unexpected tensors in weights file: {sorted(tensors)}")
    return ModelWeights(target, params, buffers, extras=extras)


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path, expected: Optional[ModelConfig] = None) -> ModelWeights:
    """Read a PGW1 file; with ``expected`` every tensor shape is checked against it."""
    return decode_weights(Path(path).read_bytes(), expected)
