"""Source pretraining: hand-derived reverse pass and SGD with momentum."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Optional

import numpy as np

from purge_gate.errors import InvalidArgumentError, TrainingFailure
from purge_gate.model import layers as L
from purge_gate.model.config import ModelConfig, TrainConfig
from purge_gate.model.network import embed_forward, forward_embedded
from purge_gate.model.weights import BNMode, ModelWeights, init_weights
from purge_gate.tokenizer import PointCloud, TokenizedSample, stack_samples, tokenize

log = logging.getLogger(__name__)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    probs = np.exp(logp)
    return loss, probs


def _block_backward(dout, cache, w, grads, prefix):
    df3 = dout
    df2, grads[prefix + "ffn.fc2.w"], grads[prefix + "ffn.fc2.b"] = L.linear_backward(df3, cache["f2"], w["ffn.fc2.w"])
    df1 = L.gelu_backward(df2, cache["fa"])
    dh2, grads[prefix + "ffn.fc1.w"], grads[prefix + "ffn.fc1.b"] = L.linear_backward(df1, cache["f1"], w["ffn.fc1.w"])
    dln2, grads[prefix + "ln2.gamma"], grads[prefix + "ln2.beta"] = L.layer_norm_backward(dh2, cache["ln2"])
    dx2 = dout + dln2
    dh1, dq, dk, dv, do, dbo = L.attention_backward(dx2, cache["attn"], w["attn.w_q"], w["attn.w_k"], w["attn.w_v"], w["attn.w_o"])
    grads[prefix + "attn.w_q"], grads[prefix + "attn.w_k"], grads[prefix + "attn.w_v"] = dq, dk, dv
    grads[prefix + "attn.w_o"], grads[prefix + "attn.b_o"] = do, dbo
    dln1, grads[prefix + "ln1.gamma"], grads[prefix + "ln1.beta"] = L.layer_norm_backward(dh1, cache["ln1"])
    return dx2 + dln1


def _keep_hook(keep):
    def hook(seq):
        kept = np.take_along_axis(seq[:, 1:], keep[:, :, None], axis=1)
        return np.concatenate([seq[:, :1], kept], axis=1)

    return hook


def loss_and_grads(weights: ModelWeights, centers, neighborhoods, labels, bn_mode=BNMode.TRAINING, keep=None):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    ``keep`` optionally gives per-sample token indices ``(B, L')`` that enter
    the transformer; the others are dropped after embedding. It may also be a
    callable that maps the embedded tokens to such indices.
    """
    p, cfg = weights.params, weights.config
    bn_mode = BNMode(bn_mode)
    labels = np.asarray(labels)
    tokens, ecache = embed_forward(weights, centers, neighborhoods, bn_mode, keep_cache=True)
    if callable(keep):
        keep = keep(tokens)
    hook = _keep_hook(keep) if keep is not None else None
    trace = forward_embedded(weights, tokens, purge_hook=hook, keep_cache=True)
    loss, probs = cross_entropy(trace.logits, labels)
    c = trace.caches
    b = len(labels)

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    dhz, grads["head.fc.w"], grads["head.fc.b"] = L.linear_backward(dlogits, c["hfc"], p["head.fc.w"])
    dz, grads["head.ln.gamma"], grads["head.ln.beta"] = L.layer_norm_backward(dhz, c["hln"])
    dx = np.zeros((b, c["seq_len"], cfg.d))
    dx[:, 0] = dz
    for i in reversed(range(cfg.n_blocks)):
        dx = _block_backward(dx, c["blocks"][i], weights.block(i), grads, f"blocks.{i}.")
    grads["cls_token"] = dx[:, 0].sum(axis=0)
    if keep is None:
        dtok = dx[:, 1:]
    else:
        dtok = np.zeros_like(tokens)
        np.put_along_axis(dtok, keep[:, :, None], dx[:, 1:], axis=1)

    dq2, grads["pos.fc2.w"], grads["pos.fc2.b"] = L.linear_backward(dtok, ecache["pfc2"], p["pos.fc2.w"])
    dq1 = L.gelu_backward(dq2, ecache["pact"])
    _, grads["pos.fc1.w"], grads["pos.fc1.b"] = L.linear_backward(dq1, ecache["pfc1"], p["pos.fc1.w"])

    dh4 = L.max_pool_backward(dtok, ecache["pool"])
    dh3, grads["embed.fc2.w"], grads["embed.fc2.b"] = L.linear_backward(dh4, ecache["fc2"], p["embed.fc2.w"])
    dh2 = L.gelu_backward(dh3, ecache["act"])
    dh1, grads["embed.bn.gamma"], grads["embed.bn.beta"] = L.batch_norm_backward(dh2, ecache["bn"], ecache["bn_batch"])
    _, grads["embed.fc1.w"], grads["embed.fc1.b"] = L.linear_backward(dh1, ecache["fc1"], p["embed.fc1.w"])
    return loss, grads, trace.logits


def tokenize_dataset(clouds: Iterable[PointCloud], cfg: ModelConfig, seed_index: int = 0) -> list[TokenizedSample]:
    return [tokenize(c, cfg.n_tokens, cfg.k, seed_index) for c in clouds]


def _as_tokenized(dataset, cfg):
    samples = list(dataset)
    if samples and isinstance(samples[0], PointCloud):
        samples = tokenize_dataset(samples, cfg)
    return samples


def _drop_outliers(n_drop):
    # drop the tokens farthest (standardized) from the batch's own token statistics
    def select(tokens):
        flat = tokens.reshape(-1, tokens.shape[-1])
        z = (tokens - flat.mean(axis=0)) / (flat.std(axis=0) + 1e-6)
        score = np.einsum("bld,bld->bl", z, z)
        return np.sort(np.argsort(score, axis=1, kind="stable")[:, : tokens.shape[1] - n_drop], axis=1)

    return select


def _drop_tokens(rng, batch, n_tokens, max_fraction, outlier_prob=0.0):
    """Per-sample token subsets of one shared size, or None for no dropping."""
    max_drop = int(max_fraction * n_tokens)
    if max_drop < 1:
        return None
    n_drop = int(rng.integers(0, max_drop + 1))
    if n_drop == 0:
        return None
    if outlier_prob > 0 and rng.random() < outlier_prob:
        return _drop_outliers(n_drop)
    scores = rng.random((batch, n_tokens))
    return np.sort(np.argsort(scores, axis=1)[:, n_drop:], axis=1)


def train_source(
    dataset,
    config: ModelConfig,
    hyper: Optional[TrainConfig] = None,
    steps: Optional[int] = None,
    progress=None,
) -> ModelWeights:
    """Fit the classifier on labeled clouds (or pre-tokenized samples).

    SGD with momentum, cosine-decayed step size, L2 weight decay on matrices
    and global-norm gradient clipping. With ``hyper.token_drop > 0`` each
    batch drops a random number (up to that fraction) of tokens after
    embedding, which keeps the classifier usable when tokens go missing.
    With probability ``hyper.outlier_drop`` the dropped tokens are the ones
    farthest from the batch's token mean instead of random ones, so the model
    also learns to do without its least typical patches. ``steps`` overrides
    the epoch budget.
    The returned weights are rounded to float32 so that they survive a
    save/load round trip unchanged.
    """
    hyper = hyper or TrainConfig()
    samples = _as_tokenized(dataset, config)
    if not samples:
        raise InvalidArgumentError("empty training set")
    labels = np.array([s.label for s in samples])
    if any(s.label is None for s in samples):
        raise InvalidArgumentError("training samples must be labeled")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise InvalidArgumentError(f"labels must lie in [0, {config.n_classes})")
    if len(samples) > 1 and len(np.unique(labels)) < 2:
        raise InvalidArgumentError("need at least two classes to train a classifier")
    centers, nbhd = stack_samples(samples)

    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 1]))
    weights = init_weights(config, seed=int(np.random.SeedSequence([hyper.seed, 0]).generate_state(1)[0]))
    velocity = {k: np.zeros_like(v) for k, v in weights.params.items()}
    n = len(samples)
    bs = min(hyper.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = steps if steps is not None else hyper.epochs * per_epoch
    step, loss = 0, float("nan")
    # overflow is reported through TrainingFailure below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        while step < total:
            order = rng.permutation(n)
            for start in range(0, n, bs):
                if step >= total:
                    break
                idx = order[start : start + bs]
                if len(idx) < 2 and n >= 2:
                    continue
                lr = hyper.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
                keep = _drop_tokens(rng, len(idx), config.n_tokens, hyper.token_drop, hyper.outlier_drop)
                loss, grads, _ = loss_and_grads(weights, centers[idx], nbhd[idx], labels[idx], keep=keep)
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if not (np.isfinite(loss) and np.isfinite(norm)):
                    raise TrainingFailure(
                        f"loss became {loss} (gradient norm {norm}) at step {step}",
                        {"step": step, "lr": lr, "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()}},
                    )
                clip = min(1.0, hyper.grad_clip / (norm + 1e-12)) if hyper.grad_clip else 1.0
                for name, g in grads.items():
                    w = weights.params[name]
                    g = g * clip
                    if w.ndim == 2:
                        g = g + hyper.weight_decay * w
                    v = velocity[name]
                    v *= hyper.momentum
                    v += g
                    w -= lr * v
                step += 1
                if progress is not None:
                    progress(step, total, float(loss))
    log.info("training finished after %d steps, last loss %.4g", step, loss)
    with np.errstate(over="ignore"):
        weights.to_float32_grid()
    bad = [k for k, v in {**weights.params, **weights.buffers}.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingFailure(f"{len(bad)} tensor(s) are not finite after training", {"tensors": bad})
    weights.bn_mode = BNMode.FROZEN
    return weights
