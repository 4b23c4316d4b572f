"""Backpropagation-free test-time adaptation loop.

Every batch is embedded once; each purge-size candidate then runs the
transformer on its own purged copy of the tokens, and each sample keeps the
prediction of the candidate with the lowest logit entropy.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from purge_gate.errors import InvalidArgumentError
from purge_gate.model.network import as_arrays, embed_forward, forward_embedded
from purge_gate.model.weights import BNMode, ModelWeights
from purge_gate.purge import CosineGate, MahalanobisGate, SourceStats, cls_prototype
from purge_gate.tokenizer import PointCloud, tokenize

WIDE_CANDIDATES = (0, 2, 4, 8, 16, 32)
CSV_COLUMNS = ("sample_id", "label", "variant", "corruption", "severity", "candidate", "entropy", "pred", "selected", "correct")


class Variant(str, enum.Enum):
    SOURCE_ONLY = "source_only"
    PG_SP = "pg_sp"
    PG_SF = "pg_sf"

    @classmethod
    def parse(cls, value) -> "Variant":
        aliases = {"none": cls.SOURCE_ONLY, "sp": cls.PG_SP, "sf": cls.PG_SF}
        if isinstance(value, str) and value in aliases:
            return aliases[value]
        return cls(value)


@dataclass(frozen=True)
class PurgeCandidateSet:
    candidates: tuple[int, ...] = (0, 2, 4, 8, 16)

    def __post_init__(self):
        values = tuple(int(c) for c in self.candidates)
        if not values:
            raise InvalidArgumentError("candidate set is empty")
        if len(set(values)) != len(values):
            raise InvalidArgumentError(f"duplicate purge sizes in {values}")
        if min(values) < 0:
            raise InvalidArgumentError("purge sizes must be non-negative")
        if 0 not in values:
            raise InvalidArgumentError("the candidate set must contain 0 (the no-purge arm)")
        object.__setattr__(self, "candidates", tuple(sorted(values)))

    def check(self, n_tokens: int) -> None:
        bad = [c for c in self.candidates if c >= n_tokens]
        if bad:
            raise InvalidArgumentError(f"purge sizes {bad} leave no tokens out of {n_tokens}")

    @classmethod
    def feasible(cls, values: Sequence[int], n_tokens: int) -> "PurgeCandidateSet":
        """Keep only the sizes that leave at least one token."""
        return cls(tuple(v for v in values if v < n_tokens))


def entropy(logits) -> np.ndarray:
    """Shannon entropy (nats) of softmax(logits) along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    h = -np.sum(np.exp(logp) * logp, axis=-1)
    return np.maximum(h, 0.0)


def select_purge_size(per_candidate_logits: dict) -> tuple:
    """Entropy-minimizing candidate for one sample; ties go to the smaller purge size."""
    if not per_candidate_logits:
        raise InvalidArgumentError("no candidates to select from")
    best = None
    for size in sorted(per_candidate_logits):
        h = float(entropy(per_candidate_logits[size]))
        if best is None or h < best[0]:
            best = (h, size)
    return best[1], per_candidate_logits[best[1]]


def _select_batch(sizes, ent, per_batch):
    # ent: (n_candidates, B) with sizes ascending; argmin returns first -> smallest size on ties
    if per_batch:
        choice = np.full(ent.shape[1], int(np.argmin(ent.mean(axis=1))))
    else:
        choice = np.argmin(ent, axis=0)
    return choice


@dataclass
class TtaRecord:
    sample_id: int
    label: Optional[int]
    entropies: dict
    preds: dict
    selected: int
    variant: Variant

    @property
    def prediction(self) -> int:
        return self.preds[self.selected]

    @property
    def correct(self) -> bool:
        return self.label is not None and self.prediction == self.label


@dataclass
class TtaReport:
    variant: Variant
    candidates: tuple
    corruption: str = "none"
    severity: int = 0
    records: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.mean([r.correct for r in self.records]))

    def candidate_accuracy(self) -> dict:
        """Accuracy each candidate would reach if it were always chosen."""
        return {c: float(np.mean([r.preds[c] == r.label for r in self.records])) for c in self.candidates}

    def candidate_entropy(self) -> dict:
        return {c: float(np.mean([r.entropies[c] for r in self.records])) for c in self.candidates}

    def selection_histogram(self) -> dict:
        counts = {c: 0 for c in self.candidates}
        for r in self.records:
            counts[r.selected] += 1
        return counts

    def rows(self):
        for r in self.records:
            for c in self.candidates:
                yield {
                    "sample_id": r.sample_id,
                    "label": "" if r.label is None else r.label,
                    "variant": r.variant.value,
                    "corruption": self.corruption,
                    "severity": self.severity,
                    "candidate": c,
                    "entropy": repr(float(r.entropies[c])),
                    "pred": r.preds[c],
                    "selected": int(c == r.selected),
                    "correct": int(r.label is not None and r.preds[c] == r.label),
                }

    def to_csv(self, path=None, header_comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "variant": self.variant.value,
            "corruption": self.corruption,
            "severity": self.severity,
            "n_samples": len(self.records),
            "accuracy": self.accuracy,
            "candidates": list(self.candidates),
            "candidate_accuracy": {str(k): v for k, v in self.candidate_accuracy().items()},
            "candidate_entropy": {str(k): v for k, v in self.candidate_entropy().items()},
            "selected_histogram": {str(k): v for k, v in self.selection_histogram().items()},
        }


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing single sample joins the previous batch."""
    if n == 0:
        return []
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds, bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start < 2:
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def _max_threads() -> int:
    try:
        return max(1, int(os.environ.get("PURGE_GATE_THREADS", "0")) or (os.cpu_count() or 1))
    except ValueError:
        return 1


def make_gate(variant: Variant, weights: ModelWeights, prototype, n_purge: int):
    if n_purge == 0 or variant is Variant.SOURCE_ONLY:
        return None
    if variant is Variant.PG_SP:
        return MahalanobisGate(prototype, n_purge)
    return CosineGate(weights, n_purge, prototype)


def tta_evaluate(
    weights: ModelWeights,
    stats_or_prototype,
    dataset,
    candidates=None,
    variant=Variant.PG_SP,
    batch_size: int = 32,
    bn_mode=None,
    corruption: str = "none",
    severity: int = 0,
    per_batch_selection: bool = False,
    parallel_arms: bool = False,
) -> TtaReport:
    """Evaluate a (corrupted) stream with entropy-selected token purging.

    ``stats_or_prototype`` is a :class:`SourceStats` for ``pg_sp``, an optional
    precomputed CLS prototype for ``pg_sf`` and ignored for ``source_only``.
    ``bn_mode`` defaults to ``per_batch_reset`` for the purging variants and
    ``frozen`` for the baseline. Weights are only read.
    """
    variant = Variant.parse(variant)
    cfg = weights.config
    if variant is Variant.SOURCE_ONLY:
        cand = PurgeCandidateSet((0,))
    elif isinstance(candidates, PurgeCandidateSet):
        cand = candidates
    else:
        cand = PurgeCandidateSet(tuple(candidates) if candidates is not None else (0, 2, 4, 8, 16))
    cand.check(cfg.n_tokens)
    if bn_mode is None:
        bn_mode = BNMode.FROZEN if variant is Variant.SOURCE_ONLY else BNMode.PER_BATCH_RESET
    bn_mode = BNMode(bn_mode)
    if bn_mode is BNMode.TRAINING:
        raise InvalidArgumentError("test-time evaluation never runs BatchNorm in training mode")
    if bn_mode is BNMode.PER_BATCH_RESET and batch_size < 2:
        raise InvalidArgumentError("per_batch_reset needs batch_size >= 2")

    prototype = stats_or_prototype
    if variant is Variant.PG_SP and not isinstance(prototype, SourceStats):
        raise InvalidArgumentError("pg_sp needs SourceStats")
    if variant is Variant.PG_SF and prototype is None:
        prototype = cls_prototype(weights)

    samples = [
        tokenize(s, cfg.n_tokens, cfg.k) if isinstance(s, PointCloud) else s for s in dataset
    ]
    if bn_mode is BNMode.PER_BATCH_RESET and len(samples) == 1:
        raise InvalidArgumentError("per_batch_reset cannot normalize a single-sample stream")
    report = TtaReport(variant=variant, candidates=cand.candidates, corruption=str(corruption), severity=int(severity))
    sizes = cand.candidates
    pool = ThreadPoolExecutor(max_workers=min(len(sizes), _max_threads())) if parallel_arms else None
    try:
        for sl in batch_slices(len(samples), batch_size):
            chunk = samples[sl]
            emb, _ = embed_forward(weights, *as_arrays(chunk), bn_mode)

            def arm(size, emb=emb):
                return forward_embedded(weights, emb, make_gate(variant, weights, prototype, size)).logits

            logits = list(pool.map(arm, sizes)) if pool else [arm(s) for s in sizes]
            ent = np.stack([entropy(lg) for lg in logits])
            preds = np.stack([lg.argmax(axis=-1) for lg in logits])
            choice = _select_batch(sizes, ent, per_batch_selection)
            for j, sample in enumerate(chunk):
                report.records.append(
                    TtaRecord(
                        sample_id=sl.start + j,
                        label=sample.label,
                        entropies={s: float(ent[a, j]) for a, s in enumerate(sizes)},
                        preds={s: int(preds[a, j]) for a, s in enumerate(sizes)},
                        selected=sizes[int(choice[j])],
                        variant=variant,
                    )
                )
    finally:
        if pool:
            pool.shutdown()
    return report
