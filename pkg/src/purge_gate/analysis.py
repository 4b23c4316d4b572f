"""Empirical checks of how layer norm and attention behave under noise, and
purge-size sweeps. Every function is a pure function of its inputs and seed."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from purge_gate.adapt import Variant, batch_slices, entropy, make_gate
from purge_gate.errors import InvalidArgumentError
from purge_gate.model.layers import layer_norm
from purge_gate.model.network import as_arrays, embed_forward, forward_embedded
from purge_gate.model.weights import BNMode, ModelWeights

MIN_REPLICATES = 30


@dataclass
class SweepResult:
    name: str
    variable: str
    rows: list[dict] = field(default_factory=list)
    seed: int = 0
    notes: dict = field(default_factory=dict)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        if self.rows:
            writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def ln_lipschitz_bound(gamma, sigma_min: float) -> float:
    """Lipschitz constant of LN on vectors whose std is at least ``sigma_min``.

    LN is the centering projection followed by a radial map onto the sphere
    of radius sqrt(d), then a diagonal scale; the radial map is
    (1/sigma_min)-Lipschitz outside the ball it maps from, so
    ``M = max|gamma| / sigma_min``.
    """
    return float(np.max(np.abs(gamma))) / sigma_min


def _sample_compact(rng, n, d, sigma_min, sigma_max):
    """Points ``m * 1 + s * sqrt(d) * u`` with ``u`` a unit vector orthogonal to 1, so std(x) = s."""
    u = rng.standard_normal((n, d))
    u -= u.mean(axis=1, keepdims=True)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    s = rng.uniform(sigma_min, sigma_max, size=(n, 1))
    m = rng.uniform(-1.0, 1.0, size=(n, 1))
    return m, s, u


def _assemble(m, s, u, d):
    return m + s * np.sqrt(d) * u


def check_ln_lipschitz(
    d: int = 64,
    n_pairs: int = 100_000,
    sigma_min: float = 0.5,
    gamma=1.0,
    sigma_max: float = 2.0,
    eps: float = 1e-5,
    seed: int = 0,
) -> SweepResult:
    """Compare ``||LN(u) - LN(v)|| / ||u - v||`` with the analytic bound.

    Half of the pairs are independent draws from the compact set
    ``{x : std(x) >= sigma_min, |mean(x)| <= 1, std(x) <= sigma_max}``; the other
    half are close pairs near ``sigma_min``, where the local stretch is largest.
    Raises ``AssertionError`` if any pair exceeds the bound.
    """
    if not sigma_min > 0:
        raise InvalidArgumentError("sigma_min must be positive")
    rng = np.random.default_rng(seed)
    gamma_vec = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (d,))
    beta = np.zeros(d)
    bound = ln_lipschitz_bound(gamma_vec, sigma_min)

    half = n_pairs // 2
    m1, s1, u1 = _sample_compact(rng, n_pairs, d, sigma_min, sigma_max)
    m2, s2, u2 = _sample_compact(rng, n_pairs, d, sigma_min, sigma_max)
    # close pairs: small moves of the first point, std pushed toward the floor
    s1[half:] = sigma_min + rng.exponential(0.01, size=(n_pairs - half, 1))
    step = 10.0 ** rng.uniform(-6, -1, size=(n_pairs - half, 1))
    du = rng.standard_normal((n_pairs - half, d))
    du -= du.mean(axis=1, keepdims=True)
    u2[half:] = u1[half:] + step * du / np.linalg.norm(du, axis=1, keepdims=True)
    u2[half:] /= np.linalg.norm(u2[half:], axis=1, keepdims=True)
    s2[half:] = np.maximum(sigma_min, s1[half:] + step * rng.standard_normal((n_pairs - half, 1)))
    m2[half:] = m1[half:] + step * rng.standard_normal((n_pairs - half, 1))
    x, y = _assemble(m1, s1, u1, d), _assemble(m2, s2, u2, d)

    num = np.linalg.norm(layer_norm(x, gamma_vec, beta, eps) - layer_norm(y, gamma_vec, beta, eps), axis=1)
    den = np.linalg.norm(x - y, axis=1)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    violations = int(np.sum(ratio > bound * (1 + 1e-9)))
    result = SweepResult("ln_lipschitz", "pair_kind", seed=seed)
    for kind, sl in (("independent", slice(0, half)), ("close", slice(half, n_pairs))):
        r = ratio[sl]
        result.rows.append(
            dict(pair_kind=kind, n=int(r.size), mean=float(r.mean()), var=float(r.var()), max=float(r.max()),
                 bound=bound, violations=int(np.sum(r > bound * (1 + 1e-9))))
        )
    result.notes = {"bound": bound, "max_ratio": float(ratio.max()), "violations": violations, "d": d}
    assert violations == 0, f"{violations} pairs exceed the Lipschitz bound {bound}"
    return result


def check_sphere_orthogonality(d_list=(32, 100, 256), n_pairs: int = 10_000, seed: int = 0, control: bool = False) -> SweepResult:
    """Mean and variance of ``u . v`` for independent uniform unit vectors, per dimension.

    With ``control`` an extra row with ``u = v`` is appended (dot product 1).
    """
    if n_pairs < MIN_REPLICATES:
        raise InvalidArgumentError(f"need at least {MIN_REPLICATES} pairs")
    rng = np.random.default_rng(seed)
    result = SweepResult("sphere", "d", seed=seed)
    for d in d_list:
        if d < 2:
            raise InvalidArgumentError("dimension must be at least 2")
        u = rng.standard_normal((n_pairs, d))
        v = rng.standard_normal((n_pairs, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        dots = np.sum(u * v, axis=1)
        result.rows.append(dict(d=int(d), n=n_pairs, mean=float(dots.mean()), var=float(dots.var(ddof=1)),
                                max=float(np.abs(dots).max()), expected_var=1.0 / d))
    if control:
        d = int(d_list[-1])
        u = rng.standard_normal((n_pairs, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        dots = np.sum(u * u, axis=1)
        result.rows.append(dict(d=d, n=n_pairs, mean=float(dots.mean()), var=float(dots.var(ddof=1)),
                                max=float(dots.max()), expected_var=0.0))
    return result


def attention_deviation(attn: np.ndarray) -> float:
    """Mean absolute gap between attention weights and the uniform value 1/T."""
    return float(np.mean(np.abs(attn - 1.0 / attn.shape[-1])))


def check_attention_uniformity(
    weights: ModelWeights,
    clean_batch,
    noise_scales=(0.0, 1.0, 10.0, 100.0, 1000.0),
    replicates: int = 100,
    seed: int = 0,
    block: int = 0,
    jitter: float = 0.05,
    check: bool = True,
) -> SweepResult:
    """Attention flattening as Gaussian noise of growing scale is added to the
    token embeddings (not the CLS token) in front of the first block.

    Each replicate draws one noise tensor and reuses it for every scale.
    With ``check`` the mean deviation must not grow by more than ``jitter``
    (relative) from one scale to the next.
    """
    scales = [float(s) for s in noise_scales]
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise InvalidArgumentError("noise scales must be ascending")
    if replicates < MIN_REPLICATES:
        raise InvalidArgumentError(f"need at least {MIN_REPLICATES} replicates")
    emb, _ = embed_forward(weights, *as_arrays(clean_batch), BNMode.FROZEN)
    rng = np.random.default_rng(seed)
    devs = np.zeros((len(scales), replicates))
    for r in range(replicates):
        noise = rng.standard_normal(emb.shape)
        for i, s in enumerate(scales):
            trace = forward_embedded(weights, emb + s * noise)
            devs[i, r] = attention_deviation(trace.attention[block])
    result = SweepResult("attention_uniformity", "noise_scale", seed=seed)
    n_rows = emb.shape[1] + 1
    for s, dv in zip(scales, devs):
        result.rows.append(dict(noise_scale=s, n=replicates, mean=float(dv.mean()), var=float(dv.var(ddof=1)),
                                max=float(dv.max()), uniform_value=1.0 / n_rows))
    means = result.column("mean")
    result.notes = {"non_increasing": bool(np.all(means[1:] <= means[:-1] * (1 + jitter)))}
    if check:
        assert result.notes["non_increasing"], f"attention deviation grew with noise: {means.tolist()}"
    return result


def spearman(x, y) -> float:
    """Rank correlation; NaN when either input is constant."""
    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def rises_then_falls(values, window: int = 3) -> bool:
    """True if the moving average peaks strictly inside the range, above both ends."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window + 2:
        return False
    smooth = np.convolve(v, np.ones(window) / window, mode="valid")
    peak = int(np.argmax(smooth))
    return 0 < peak < smooth.size - 1 and smooth[peak] > smooth[0] and smooth[peak] > smooth[-1]


def purge_size_sweep(
    weights: ModelWeights,
    stats,
    dataset,
    purge_sizes=None,
    variant=Variant.PG_SP,
    batch_size: int = 32,
    bn_mode=BNMode.PER_BATCH_RESET,
    corruption: str = "background",
) -> SweepResult:
    """Accuracy and mean entropy for every fixed purge size over a tokenized, labeled stream."""
    cfg = weights.config
    sizes = list(range(cfg.n_tokens)) if purge_sizes is None else [int(s) for s in purge_sizes]
    if any(not 0 <= s < cfg.n_tokens for s in sizes):
        raise InvalidArgumentError(f"purge sizes must lie in [0, {cfg.n_tokens - 1}]")
    variant = Variant.parse(variant)
    samples = list(dataset)
    labels = np.array([s.label for s in samples])
    preds = np.zeros((len(sizes), len(samples)), dtype=np.int64)
    ents = np.zeros((len(sizes), len(samples)))
    for sl in batch_slices(len(samples), batch_size):
        emb, _ = embed_forward(weights, *as_arrays(samples[sl]), BNMode(bn_mode))
        for i, size in enumerate(sizes):
            logits = forward_embedded(weights, emb, make_gate(variant, weights, stats, size)).logits
            preds[i, sl] = logits.argmax(axis=-1)
            ents[i, sl] = entropy(logits)
    result = SweepResult("purge_size_sweep", "purge_size")
    for i, size in enumerate(sizes):
        result.rows.append(dict(purge_size=size, n=len(samples), accuracy=float(np.mean(preds[i] == labels)),
                                mean_entropy=float(ents[i].mean()), corruption=corruption))
    acc, ent = result.column("accuracy"), result.column("mean_entropy")
    result.notes = {
        "spearman_entropy_accuracy": spearman(ent, acc) if len(sizes) > 2 else float("nan"),
        "rises_then_falls": rises_then_falls(acc),
        "best_size": sizes[int(np.argmax(acc))],
    }
    return result


def arm_costs(weights: ModelWeights, batch, stats, purge_sizes=(0, 8, 16, 24), repeats: int = 20,
              bn_mode=BNMode.PER_BATCH_RESET) -> SweepResult:
    """Best-of-``repeats`` wall time of one purged transformer pass per purge size,
    with the attention shape each pass produced. Embedding is shared and not timed."""
    emb, _ = embed_forward(weights, *as_arrays(batch), BNMode(bn_mode))
    result = SweepResult("arm_costs", "purge_size")
    for size in purge_sizes:
        gate = make_gate(Variant.PG_SP, weights, stats, size)
        best, shapes = float("inf"), None
        for _ in range(repeats):
            t0 = time.perf_counter()
            trace = forward_embedded(weights, emb, gate)
            best = min(best, time.perf_counter() - t0)
            shapes = [a.shape for a in trace.attention]
        result.rows.append(dict(purge_size=int(size), seconds=best, attention_rows=shapes[0][-2],
                                attention_cols=shapes[0][-1], max_attention_entries=max(s[-1] * s[-2] for s in shapes)))
    return result
