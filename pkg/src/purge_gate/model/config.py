from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from purge_gate.errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the classifier. ``n_tokens`` is the token count per cloud."""

    d: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    n_tokens: int = 32
    k: int = 16
    n_classes: int = 4
    ln_eps: float = 1e-5
    embed_hidden: int = 32
    ffn_hidden: int = 128
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("d", "n_blocks", "n_heads", "n_tokens", "k", "n_classes", "embed_hidden", "ffn_hidden"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_classes < 2:
            raise ConfigError("a classifier needs at least 2 classes")
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if not self.ln_eps > 0 or not self.bn_eps > 0:
            raise ConfigError("normalization eps must be positive")
        if not 0 < self.bn_momentum <= 1:
            raise ConfigError("bn_momentum must be in (0, 1]")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    token_drop: float = 0.5
    outlier_drop: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.token_drop < 1:
            raise ConfigError("token_drop must be in [0, 1)")
        if not 0 <= self.outlier_drop <= 1:
            raise ConfigError("outlier_drop must be in [0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**data)
