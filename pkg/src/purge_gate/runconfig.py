"""Run configuration shared by the CLI subcommands."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from purge_gate.adapt import PurgeCandidateSet, Variant
from purge_gate.corruptions import CorruptionSpec
from purge_gate.data import DatasetSpec
from purge_gate.errors import ConfigError, InvalidArgumentError
from purge_gate.model.config import ModelConfig, TrainConfig
from purge_gate.model.weights import BNMode
from purge_gate.purge import StatsOrigin

PURPOSES = {"data": 0, "init": 1, "corruption": 2, "analysis": 3}


def derive_seed(root: int, purpose: str, *extra: int) -> int:
    """64-bit seed for one pipeline stage, split off the root seed."""
    seq = np.random.SeedSequence([int(root), PURPOSES[purpose], *map(int, extra)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    corruption: str = "none"
    severity: int = 1
    candidates: tuple[int, ...] = (0, 2, 4, 8, 16)
    variant: str = "pg_sp"
    bn: str = "per_batch_reset"
    batch_size: int = 32
    stats_origin: str = "embedding_output"
    seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        try:
            CorruptionSpec(self.corruption, self.severity, 0)
            cand = PurgeCandidateSet(tuple(self.candidates))
            Variant.parse(self.variant)
            BNMode(self.bn)
            StatsOrigin(self.stats_origin)
        except (InvalidArgumentError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        m, d = self.model, self.data
        if m.n_tokens > d.n_points:
            raise ConfigError(f"n_tokens={m.n_tokens} exceeds points per cloud ({d.n_points})")
        if m.k > d.n_points:
            raise ConfigError(f"k={m.k} exceeds points per cloud ({d.n_points})")
        if m.n_classes != len(d.classes):
            raise ConfigError(f"model has {m.n_classes} classes but the dataset has {len(d.classes)}")
        if max(cand.candidates) >= m.n_tokens:
            raise ConfigError(
                f"purge sizes must be below n_tokens={m.n_tokens}; got {list(cand.candidates)}"
            )
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "candidates", cand.candidates)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["candidates"] = list(self.candidates)
        out["data"]["classes"] = list(self.data.classes)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        try:
            model = ModelConfig.from_dict(raw.pop("model", {}))
            trainer = TrainConfig.from_dict(raw.pop("trainer", {}))
            data_raw = dict(raw.pop("data", {}))
            if "classes" in data_raw:
                data_raw["classes"] = tuple(data_raw["classes"])
            data = DatasetSpec(**data_raw)
            if "candidates" in raw:
                raw["candidates"] = tuple(raw["candidates"])
            return cls(model=model, trainer=trainer, data=data, **raw)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)

    def override(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        try:
            return replace(self, **changes)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
