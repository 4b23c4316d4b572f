"""Token purging: score each token's divergence from a source prototype and
drop the most divergent ones before the first attention layer."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from purge_gate.errors import InvalidArgumentError
from purge_gate.model.layers import layer_norm
from purge_gate.model.network import as_arrays, embed_forward, forward_embedded
from purge_gate.model.weights import BNMode, ModelWeights

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


class StatsOrigin(str, enum.Enum):
    EMBEDDING_OUTPUT = "embedding_output"
    FIRST_LN_INPUT = "first_ln_input"


@dataclass(frozen=True)
class SourceStats:
    mu: np.ndarray
    sigma: np.ndarray
    n_samples: int
    origin: StatsOrigin = StatsOrigin.EMBEDDING_OUTPUT

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidArgumentError("source statistics need at least one sample")
        if np.any(self.sigma < 0):
            raise InvalidArgumentError("sigma must be non-negative")
        object.__setattr__(self, "origin", StatsOrigin(self.origin))

    def to_tensors(self) -> dict[str, np.ndarray]:
        origin_code = 0.0 if self.origin is StatsOrigin.EMBEDDING_OUTPUT else 1.0
        return {
            "pg.mu_S": np.asarray(self.mu, dtype=np.float64),
            "pg.sigma_S": np.asarray(self.sigma, dtype=np.float64),
            "pg.n": np.array([float(self.n_samples), origin_code]),
        }

    @classmethod
    def from_tensors(cls, tensors: dict) -> "SourceStats":
        try:
            n, origin_code = tensors["pg.n"]
            mu, sigma = tensors["pg.mu_S"], tensors["pg.sigma_S"]
        except (KeyError, ValueError):
            raise InvalidArgumentError("weights file carries no source statistics (pg.* tensors)") from None
        origin = StatsOrigin.EMBEDDING_OUTPUT if origin_code == 0 else StatsOrigin.FIRST_LN_INPUT
        return cls(mu=mu, sigma=sigma, n_samples=int(n), origin=origin)


def welford_collect(embedding_stream: Iterable[np.ndarray]) -> SourceStats:
    """Running average of per-sample token mean and token std.

    Each ``(L, d)`` matrix contributes its mean over tokens and its population
    std over tokens (around that sample's own mean); both are folded into the
    running estimates with ``phi += (phi_i - phi) / n``.
    """
    mu = sigma = None
    n = 0
    for emb in embedding_stream:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2:
            raise InvalidArgumentError(f"each sample must be an (L, d) matrix, got shape {emb.shape}")
        mu_i = emb.mean(axis=0)
        sigma_i = np.sqrt(np.mean((emb - mu_i) ** 2, axis=0))
        n += 1
        if mu is None:
            mu, sigma = mu_i.copy(), sigma_i.copy()
        else:
            mu += (mu_i - mu) / n
            sigma += (sigma_i - sigma) / n
    if n == 0:
        raise InvalidArgumentError("cannot collect statistics from an empty stream")
    return SourceStats(mu=mu, sigma=sigma, n_samples=n, origin=StatsOrigin.EMBEDDING_OUTPUT)


class TokenWelford:
    """Token-level running mean/variance, as kept by a statistics-recording LayerNorm.

    Batches are merged with the pairwise (Chan et al.) form of Welford's update,
    so feeding tokens one at a time or in blocks gives the same result up to
    rounding.
    """

    def __init__(self, d: int):
        self.count = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros(d)
        self.n_samples = 0

    def __call__(self, tokens: np.ndarray) -> None:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 3:
            self.n_samples += tokens.shape[0]
        else:
            self.n_samples += 1
        flat = tokens.reshape(-1, tokens.shape[-1])
        nb = flat.shape[0]
        if nb == 0:
            return
        mean_b = flat.mean(axis=0)
        m2_b = np.sum((flat - mean_b) ** 2, axis=0)
        total = self.count + nb
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (nb / total)
        self.m2 = self.m2 + m2_b + delta**2 * (self.count * nb / total)
        self.count = total

    def stats(self) -> SourceStats:
        if self.count == 0:
            raise InvalidArgumentError("no tokens observed")
        return SourceStats(
            mu=self.mean.copy(),
            sigma=np.sqrt(self.m2 / self.count),
            n_samples=self.n_samples,
            origin=StatsOrigin.FIRST_LN_INPUT,
        )


def _batches(samples, size):
    for start in range(0, len(samples), size):
        yield samples[start : start + size]


def collect_source_stats(
    weights: ModelWeights,
    samples,
    origin=StatsOrigin.EMBEDDING_OUTPUT,
    batch_size: int = 32,
    bn_mode=BNMode.FROZEN,
) -> SourceStats:
    """Source prototype for the statistics-based variant.

    ``embedding_output`` averages per-sample token statistics of the embedding
    output; ``first_ln_input`` accumulates token-level statistics at the input
    of the first LayerNorm during a full forward pass. Samples are processed in
    the given order, so the result is reproducible.
    """
    origin = StatsOrigin(origin)
    samples = list(samples)
    if not samples:
        raise InvalidArgumentError("cannot collect statistics from an empty stream")
    bn_mode = BNMode(bn_mode)
    if origin is StatsOrigin.EMBEDDING_OUTPUT:

        def stream():
            for chunk in _batches(samples, batch_size):
                emb, _ = embed_forward(weights, *as_arrays(chunk), bn_mode)
                yield from emb

        return welford_collect(stream())
    recorder = TokenWelford(weights.config.d)
    for chunk in _batches(samples, batch_size):
        emb, _ = embed_forward(weights, *as_arrays(chunk), bn_mode)
        forward_embedded(weights, emb, observer=recorder)
    return recorder.stats()


def mahalanobis_divergence(tokens: np.ndarray, stats: SourceStats) -> np.ndarray:
    """Diagonal-covariance Mahalanobis distance of each token (last axis) to the source mean."""
    sigma = np.maximum(np.asarray(stats.sigma, dtype=np.float64), SIGMA_FLOOR)
    z = (np.asarray(tokens, dtype=np.float64) - stats.mu) / sigma
    return np.sqrt(np.sum(z * z, axis=-1))


def cls_prototype(weights: ModelWeights) -> np.ndarray:
    """The learned CLS vector after block 0's first LayerNorm, projected by its query matrix."""
    w = weights.block(0)
    h = layer_norm(weights.params["cls_token"], w["ln1.gamma"], w["ln1.beta"], weights.config.ln_eps)
    return h @ w["attn.w_q"]


def cosine_divergence(tokens: np.ndarray, prototype: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Negative cosine between each token's block-0 key and ``prototype``.

    +1 means anti-aligned (most divergent), -1 aligned. Tokens whose key has
    zero norm score 0.
    """
    g = np.asarray(prototype, dtype=np.float64)
    g_norm = np.linalg.norm(g)
    if not g_norm > 0:
        raise InvalidArgumentError("prototype has zero norm")
    w = weights.block(0)
    keys = layer_norm(np.asarray(tokens, dtype=np.float64), w["ln1.gamma"], w["ln1.beta"], weights.config.ln_eps)
    keys = keys @ w["attn.w_k"]
    k_norm = np.linalg.norm(keys, axis=-1)
    dots = keys @ g
    dead = k_norm == 0
    if np.any(dead):
        log.warning("%d token(s) project to a zero key; scoring them as neutral", int(dead.sum()))
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(dead, 0.0, -dots / (np.where(dead, 1.0, k_norm) * g_norm))
    return delta


@dataclass(frozen=True)
class PurgePlan:
    keep_indices: np.ndarray
    removed_indices: np.ndarray


def _ranked(delta: np.ndarray) -> np.ndarray:
    # stable sort on -delta: larger divergence first, lower index first among ties
    return np.argsort(-delta, axis=-1, kind="stable")


def purge_tokens(tokens: np.ndarray, delta: np.ndarray, n_purge: int) -> PurgePlan:
    """Pick the ``n_purge`` tokens with the largest divergence for removal.

    The subset of fixed size maximizing the summed divergence is exactly the
    top-``n_purge`` set. Kept tokens stay in their original order.
    """
    delta = np.asarray(delta, dtype=np.float64)
    n_tokens = delta.shape[-1]
    if tokens is not None and np.shape(tokens)[0] != n_tokens:
        raise InvalidArgumentError(f"{np.shape(tokens)[0]} tokens but {n_tokens} divergence scores")
    if not 0 <= n_purge < n_tokens:
        raise InvalidArgumentError(f"purge size must be in [0, {n_tokens}), got {n_purge}")
    order = _ranked(delta)
    return PurgePlan(keep_indices=np.sort(order[n_purge:]), removed_indices=np.sort(order[:n_purge]))


def keep_indices_batch(delta: np.ndarray, n_purge: int) -> np.ndarray:
    """Per-sample sorted keep indices ``(B, L - n_purge)`` for scores ``(B, L)``."""
    n_tokens = delta.shape[-1]
    if not 0 <= n_purge < n_tokens:
        raise InvalidArgumentError(f"purge size must be in [0, {n_tokens}), got {n_purge}")
    return np.sort(_ranked(delta)[:, n_purge:], axis=-1)


class _Gate:
    """Purge hook: takes ``(B, 1 + L, d)`` with CLS first and returns ``(B, 1 + L - n_purge, d)``."""

    def __init__(self, n_purge: int):
        if n_purge < 0:
            raise InvalidArgumentError("purge size must be non-negative")
        self.n_purge = int(n_purge)
        self.last_keep: Optional[np.ndarray] = None

    def scores(self, tokens: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, seq: np.ndarray) -> np.ndarray:
        if self.n_purge == 0:
            self.last_keep = None
            return seq
        tokens = seq[:, 1:]
        keep = keep_indices_batch(self.scores(tokens), self.n_purge)
        self.last_keep = keep
        kept = np.take_along_axis(tokens, keep[:, :, None], axis=1)
        return np.concatenate([seq[:, :1], kept], axis=1)


class MahalanobisGate(_Gate):
    """Source-statistics gate."""

    def __init__(self, stats: SourceStats, n_purge: int):
        super().__init__(n_purge)
        self.stats = stats

    def scores(self, tokens):
        return mahalanobis_divergence(tokens, self.stats)


class CosineGate(_Gate):
    """Source-free gate using the projected CLS prototype."""

    def __init__(self, weights: ModelWeights, n_purge: int, prototype: Optional[np.ndarray] = None):
        super().__init__(n_purge)
        self.weights = weights
        self.prototype = cls_prototype(weights) if prototype is None else prototype

    def scores(self, tokens):
        return cosine_divergence(tokens, self.prototype, self.weights)
