"""Inference path of the point-cloud transformer.

Tokens are embedded by a small shared point MLP (max-pooled over each
neighborhood) plus an MLP of the center coordinates, a learned CLS vector is
prepended, and pre-LN transformer blocks follow. The purge hook, when given,
sees the input of block 0's first LayerNorm and may drop tokens there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from purge_gate.errors import InvalidArgumentError, InvalidStateError
from purge_gate.model import layers as L
from purge_gate.model.weights import BNMode, ModelWeights
from purge_gate.tokenizer import TokenizedSample, stack_samples

PurgeHook = Callable[[np.ndarray], np.ndarray]


@dataclass
class Trace:
    logits: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)
    tokens_in: Optional[np.ndarray] = None
    caches: Optional[dict] = None


def as_arrays(batch):
    """Accept a TokenizedSample, a list of them, or ``(centers, neighborhoods)``."""
    if isinstance(batch, TokenizedSample):
        batch = [batch]
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        centers, nbhd = batch
    else:
        centers, nbhd = stack_samples(list(batch))
    return np.asarray(centers, dtype=np.float64), np.asarray(nbhd, dtype=np.float64)


def _resolve_mode(weights, bn_mode):
    return BNMode(bn_mode) if bn_mode is not None else weights.bn_mode


def embed_forward(weights: ModelWeights, centers, neighborhoods, bn_mode, keep_cache=False):
    p, cfg = weights.params, weights.config
    b, n_tok, k, _ = neighborhoods.shape
    if n_tok != cfg.n_tokens or k != cfg.k:
        raise InvalidArgumentError(
            f"sample has {n_tok} tokens of {k} points, model expects {cfg.n_tokens} of {cfg.k}"
        )
    h1, c_fc1 = L.linear_forward(neighborhoods, p["embed.fc1.w"], p["embed.fc1.b"])
    if bn_mode is BNMode.FROZEN:
        mean, var = weights.buffers["embed.bn.running_mean"], weights.buffers["embed.bn.running_var"]
    else:
        if bn_mode is BNMode.PER_BATCH_RESET and b < 2:
            raise InvalidArgumentError("per_batch_reset BatchNorm needs at least 2 samples per batch")
        flat = h1.reshape(-1, h1.shape[-1])
        mean, var = flat.mean(axis=0), flat.var(axis=0)
        if bn_mode is BNMode.TRAINING:
            m, n = cfg.bn_momentum, flat.shape[0]
            buf = weights.buffers
            buf["embed.bn.running_mean"] = (1 - m) * buf["embed.bn.running_mean"] + m * mean
            buf["embed.bn.running_var"] = (1 - m) * buf["embed.bn.running_var"] + m * var * n / max(n - 1, 1)
    h2, c_bn = L.batch_norm_forward(h1, p["embed.bn.gamma"], p["embed.bn.beta"], mean, var, cfg.bn_eps)
    h3, c_act = L.gelu_forward(h2)
    h4, c_fc2 = L.linear_forward(h3, p["embed.fc2.w"], p["embed.fc2.b"])
    pooled, c_pool = L.max_pool_forward(h4, axis=2)

    q1, c_pfc1 = L.linear_forward(centers, p["pos.fc1.w"], p["pos.fc1.b"])
    q2, c_pact = L.gelu_forward(q1)
    pos, c_pfc2 = L.linear_forward(q2, p["pos.fc2.w"], p["pos.fc2.b"])
    out = pooled + pos
    cache = None
    if keep_cache:
        cache = dict(
            fc1=c_fc1, bn=c_bn, bn_batch=bn_mode is not BNMode.FROZEN, act=c_act, fc2=c_fc2, pool=c_pool,
            pfc1=c_pfc1, pact=c_pact, pfc2=c_pfc2,
        )
    return out, cache


def embed_tokens(batch, weights: ModelWeights, bn_mode=None) -> np.ndarray:
    """Token embeddings ``(B, n_tokens, d)`` (``(n_tokens, d)`` for a single sample)."""
    single = isinstance(batch, TokenizedSample)
    centers, nbhd = as_arrays(batch)
    out, _ = embed_forward(weights, centers, nbhd, _resolve_mode(weights, bn_mode))
    return out[0] if single else out


def block_forward(weights: ModelWeights, i: int, x, keep_cache=False):
    cfg = weights.config
    w = weights.block(i)
    h1, c_ln1 = L.layer_norm_forward(x, w["ln1.gamma"], w["ln1.beta"], cfg.ln_eps)
    a, attn, c_attn = L.attention_forward(
        h1, w["attn.w_q"], w["attn.w_k"], w["attn.w_v"], w["attn.w_o"], w["attn.b_o"], cfg.n_heads
    )
    x2 = x + a
    h2, c_ln2 = L.layer_norm_forward(x2, w["ln2.gamma"], w["ln2.beta"], cfg.ln_eps)
    f1, c_f1 = L.linear_forward(h2, w["ffn.fc1.w"], w["ffn.fc1.b"])
    f2, c_fa = L.gelu_forward(f1)
    f3, c_f2 = L.linear_forward(f2, w["ffn.fc2.w"], w["ffn.fc2.b"])
    out = x2 + f3
    cache = dict(ln1=c_ln1, attn=c_attn, ln2=c_ln2, f1=c_f1, fa=c_fa, f2=c_f2) if keep_cache else None
    return out, attn, cache


def forward_embedded(
    weights: ModelWeights,
    tokens: np.ndarray,
    purge_hook: Optional[PurgeHook] = None,
    observer: Optional[Callable[[np.ndarray], None]] = None,
    keep_cache: bool = False,
) -> Trace:
    """Run CLS + transformer blocks + head on embedded tokens ``(B, L, d)``.

    ``observer`` receives the tokens (without CLS) that enter block 0's first
    LayerNorm, after purging.
    """
    p, cfg = weights.params, weights.config
    b = tokens.shape[0]
    cls = np.broadcast_to(p["cls_token"], (b, 1, cfg.d))
    x = np.concatenate([cls, tokens], axis=1)
    if purge_hook is not None:
        x = purge_hook(x)
        if x.ndim != 3 or x.shape[0] != b or x.shape[2] != cfg.d:
            raise InvalidStateError(f"purge hook returned shape {x.shape}")
        if x.shape[1] < 2:
            raise InvalidStateError("purge hook removed every token")
        if not np.array_equal(x[:, 0], cls[:, 0]):
            raise InvalidStateError("purge hook must keep the CLS token at position 0")
    if observer is not None:
        observer(x[:, 1:])
    tokens_in = x
    attention, block_caches = [], []
    for i in range(cfg.n_blocks):
        x, attn, c = block_forward(weights, i, x, keep_cache)
        attention.append(attn)
        block_caches.append(c)
    z = x[:, 0]
    hz, c_hln = L.layer_norm_forward(z, p["head.ln.gamma"], p["head.ln.beta"], cfg.ln_eps)
    logits, c_hfc = L.linear_forward(hz, p["head.fc.w"], p["head.fc.b"])
    caches = dict(blocks=block_caches, hln=c_hln, hfc=c_hfc, seq_len=x.shape[1]) if keep_cache else None
    return Trace(logits=logits, attention=attention, tokens_in=tokens_in, caches=caches)


def run(batch, weights: ModelWeights, bn_mode=None, purge_hook: Optional[PurgeHook] = None) -> Trace:
    centers, nbhd = as_arrays(batch)
    tokens, _ = embed_forward(weights, centers, nbhd, _resolve_mode(weights, bn_mode))
    return forward_embedded(weights, tokens, purge_hook)


def forward(batch, weights: ModelWeights, bn_mode=None, purge_hook: Optional[PurgeHook] = None) -> np.ndarray:
    """Class logits ``(B, n_classes)`` for a batch of tokenized samples."""
    return run(batch, weights, bn_mode, purge_hook).logits
