from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from purge_gate.model.config import ModelConfig


class BNMode(str, enum.Enum):
    TRAINING = "training"
    FROZEN = "frozen"
    PER_BATCH_RESET = "per_batch_reset"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, f = cfg.d, cfg.embed_hidden, cfg.ffn_hidden
    shapes = {
        "embed.fc1.w": (3, h),
        "embed.fc1.b": (h,),
        "embed.bn.gamma": (h,),
        "embed.bn.beta": (h,),
        "embed.fc2.w": (h, d),
        "embed.fc2.b": (d,),
        "pos.fc1.w": (3, d),
        "pos.fc1.b": (d,),
        "pos.fc2.w": (d, d),
        "pos.fc2.b": (d,),
        "cls_token": (d,),
    }
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "ln1.gamma": (d,),
                p + "ln1.beta": (d,),
                p + "attn.w_q": (d, d),
                p + "attn.w_k": (d, d),
                p + "attn.w_v": (d, d),
                p + "attn.w_o": (d, d),
                p + "attn.b_o": (d,),
                p + "ln2.gamma": (d,),
                p + "ln2.beta": (d,),
                p + "ffn.fc1.w": (d, f),
                p + "ffn.fc1.b": (f,),
                p + "ffn.fc2.w": (f, d),
                p + "ffn.fc2.b": (d,),
            }
        )
    shapes.update(
        {
            "head.ln.gamma": (d,),
            "head.ln.beta": (d,),
            "head.fc.w": (d, cfg.n_classes),
            "head.fc.b": (cfg.n_classes,),
        }
    )
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"embed.bn.running_mean": (cfg.embed_hidden,), "embed.bn.running_var": (cfg.embed_hidden,)}


@dataclass
class ModelWeights:
    """Learnable parameters plus BatchNorm running statistics.

    ``bn_mode`` is the default used by forward passes that do not pass one
    explicitly; see :func:`reset_batchnorm`.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    bn_mode: BNMode = BNMode.FROZEN
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def block(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.bn_mode,
            {k: v.copy() for k, v in self.extras.items()},
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for group in (self.params, self.buffers):
            for name in sorted(group):
                h.update(name.encode())
                h.update(np.ascontiguousarray(group[name], dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_float32_grid(self) -> None:
        """Round every tensor to the nearest float32 value (what the weights file stores)."""
        for group in (self.params, self.buffers):
            for name, value in group.items():
                group[name] = value.astype(np.float32).astype(np.float64)


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("gamma",)):
            params[name] = np.ones(shape)
        elif name == "cls_token":
            params[name] = rng.standard_normal(shape)
        elif len(shape) == 2:
            fan_in, fan_out = shape
            params[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {
        "embed.bn.running_mean": np.zeros(cfg.embed_hidden),
        "embed.bn.running_var": np.ones(cfg.embed_hidden),
    }
    return ModelWeights(cfg, params, buffers)


def reset_batchnorm(weights: ModelWeights, mode) -> None:
    """Choose how BatchNorm statistics are obtained on later forward passes.

    ``per_batch_reset`` discards the stored running statistics for every pass:
    each call normalizes with its own batch statistics and never writes them
    back, so it needs at least two samples per batch. ``frozen`` uses the
    stored statistics.
    """
    weights.bn_mode = BNMode(mode)
