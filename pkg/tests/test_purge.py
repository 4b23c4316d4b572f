import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from purge_gate.errors import InvalidArgumentError
from purge_gate.model.config import ModelConfig
from purge_gate.model.network import embed_tokens
from purge_gate.model.weights import BNMode, init_weights
from purge_gate.purge import (
    CosineGate,
    MahalanobisGate,
    SourceStats,
    StatsOrigin,
    TokenWelford,
    cls_prototype,
    collect_source_stats,
    cosine_divergence,
    keep_indices_batch,
    mahalanobis_divergence,
    purge_tokens,
    welford_collect,
)
from purge_gate.tokenizer import PointCloud, tokenize

SMALL = ModelConfig(d=8, n_blocks=2, n_heads=2, n_tokens=6, k=4, n_classes=3, embed_hidden=6, ffn_hidden=12)
finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 9).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite), st.integers(0, n - 1))))
def test_purge_is_best_subset(case):
    delta, n_purge = case
    plan = purge_tokens(None, delta, n_purge)
    L = len(delta)
    best = max(sum(delta[list(c)]) for c in itertools.combinations(range(L), n_purge)) if n_purge else 0.0
    assert delta[plan.removed_indices].sum() == pytest.approx(best, abs=1e-9)
    assert sorted([*plan.keep_indices, *plan.removed_indices]) == list(range(L))
    assert list(plan.keep_indices) == sorted(plan.keep_indices)


def test_purge_ties_remove_lowest_index():
    plan = purge_tokens(None, np.array([1.0, 2.0, 2.0, 2.0, 0.0]), 2)
    assert plan.removed_indices.tolist() == [1, 2]


@pytest.mark.parametrize("n_purge", [-1, 5])
def test_purge_bounds(n_purge):
    with pytest.raises(InvalidArgumentError):
        purge_tokens(None, np.zeros(5), n_purge)


def test_keep_indices_batch_matches_single():
    rng = np.random.default_rng(0)
    delta = rng.standard_normal((4, 9))
    keep = keep_indices_batch(delta, 3)
    for row, k in zip(delta, keep):
        np.testing.assert_array_equal(k, purge_tokens(None, row, 3).keep_indices)


def test_welford_matches_two_pass():
    rng = np.random.default_rng(1)
    mats = [rng.normal(5, 3, (10, 4)) for _ in range(25)]
    st_ = welford_collect(mats)
    np.testing.assert_allclose(st_.mu, np.mean([m.mean(0) for m in mats], 0), rtol=1e-12)
    np.testing.assert_allclose(st_.sigma, np.mean([m.std(0) for m in mats], 0), rtol=1e-12)
    assert st_.n_samples == 25


def test_token_welford_chunking_invariant():
    rng = np.random.default_rng(2)
    x = rng.normal(-2, 0.5, (6, 7, 3))
    a, b = TokenWelford(3), TokenWelford(3)
    a(x)
    for i in range(6):
        for j in range(7):
            b(x[i, j : j + 1])
    np.testing.assert_allclose(a.stats().mu, b.stats().mu, rtol=1e-12)
    np.testing.assert_allclose(a.stats().sigma, x.reshape(-1, 3).std(0), rtol=1e-12)
    np.testing.assert_allclose(b.stats().sigma, x.reshape(-1, 3).std(0), rtol=1e-12)


def test_welford_empty_stream():
    with pytest.raises(InvalidArgumentError):
        welford_collect([])


def test_mahalanobis_oracle_and_floor():
    stats = SourceStats(mu=np.array([1.0, 0.0]), sigma=np.array([2.0, 0.0]), n_samples=1,
                        origin=StatsOrigin.EMBEDDING_OUTPUT)
    d = mahalanobis_divergence(np.array([[3.0, 0.0], [1.0, 1e-6]]), stats)
    np.testing.assert_allclose(d, [1.0, 1.0])


def test_stats_tensor_round_trip():
    s = SourceStats(np.arange(3.0), np.ones(3), 7, StatsOrigin.FIRST_LN_INPUT)
    back = SourceStats.from_tensors(s.to_tensors())
    assert back.origin is StatsOrigin.FIRST_LN_INPUT and back.n_samples == 7
    with pytest.raises(InvalidArgumentError):
        SourceStats.from_tensors({})


def _samples(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return [tokenize(PointCloud(rng.standard_normal((30, 3)), label=0), SMALL.n_tokens, SMALL.k) for _ in range(n)]


def test_collect_stats_embedding_output_matches_direct():
    w = init_weights(SMALL, 0)
    samples = _samples()
    stats = collect_source_stats(w, samples, batch_size=4)
    emb = embed_tokens(samples, w, BNMode.FROZEN)
    np.testing.assert_allclose(stats.mu, emb.mean(1).mean(0), rtol=1e-12)
    np.testing.assert_allclose(stats.sigma, emb.std(1).mean(0), rtol=1e-12)


def test_collect_stats_first_ln_input_is_token_level():
    w = init_weights(SMALL, 0)
    samples = _samples()
    stats = collect_source_stats(w, samples, StatsOrigin.FIRST_LN_INPUT, batch_size=4)
    flat = embed_tokens(samples, w, BNMode.FROZEN).reshape(-1, SMALL.d)
    np.testing.assert_allclose(stats.mu, flat.mean(0), rtol=1e-10)
    np.testing.assert_allclose(stats.sigma, flat.std(0), rtol=1e-10)
    assert stats.origin is StatsOrigin.FIRST_LN_INPUT


def test_cosine_divergence_range_and_alignment():
    w = init_weights(SMALL, 0)
    g = cls_prototype(w)
    tokens = np.random.default_rng(3).standard_normal((5, SMALL.d))
    d = cosine_divergence(tokens, g, w)
    assert np.all(np.abs(d) <= 1 + 1e-12)


def test_cosine_zero_key_is_neutral(caplog):
    w = init_weights(SMALL, 0)
    w.params["blocks.0.ln1.beta"][:] = 0.0
    tokens = np.ones((2, SMALL.d))  # LayerNorm maps a constant row to beta = 0
    with caplog.at_level(logging.WARNING):
        d = cosine_divergence(tokens, cls_prototype(w), w)
    np.testing.assert_array_equal(d, 0.0)
    assert "zero key" in caplog.text


def test_gates_keep_cls_and_shrink():
    w = init_weights(SMALL, 0)
    seq = np.random.default_rng(4).standard_normal((3, 1 + SMALL.n_tokens, SMALL.d))
    stats = SourceStats(np.zeros(SMALL.d), np.ones(SMALL.d), 1, StatsOrigin.EMBEDDING_OUTPUT)
    for gate in (MahalanobisGate(stats, 2), CosineGate(w, 2)):
        out = gate(seq)
        assert out.shape == (3, SMALL.n_tokens - 1, SMALL.d)
        np.testing.assert_array_equal(out[:, 0], seq[:, 0])
        kept = np.take_along_axis(seq[:, 1:], gate.last_keep[:, :, None], 1)
        np.testing.assert_array_equal(out[:, 1:], kept)
    assert MahalanobisGate(stats, 0)(seq) is seq


def test_mahalanobis_gate_removes_outliers():
    seq = np.zeros((1, 5, 2))
    seq[0, 2] = [10, 0]
    seq[0, 4] = [0, -7]
    stats = SourceStats(np.zeros(2), np.ones(2), 1, StatsOrigin.EMBEDDING_OUTPUT)
    gate = MahalanobisGate(stats, 2)
    gate(seq)
    assert gate.last_keep.tolist() == [[0, 2]]


@pytest.mark.parametrize(
    "x,sigma,expected",
    [([3.0, 4.0], [1.0, 1.0], 5.0), ([0.0, 0.0], [1.0, 1.0], 0.0), ([2.0, 0.0], [2.0, 1.0], 1.0)],
)
def test_mahalanobis_worked_values(x, sigma, expected):
    stats = SourceStats(mu=np.zeros(2), sigma=np.array(sigma), n_samples=1)
    assert mahalanobis_divergence(np.array([x]), stats)[0] == pytest.approx(expected, abs=1e-12)


def test_purge_worked_plan():
    plan = purge_tokens(None, np.array([0.1, 0.9, 0.5, 0.3]), 2)
    assert plan.removed_indices.tolist() == [1, 2]
    assert plan.keep_indices.tolist() == [0, 3]
    ident = purge_tokens(None, np.array([0.1, 0.9, 0.5, 0.3]), 0)
    assert ident.keep_indices.tolist() == [0, 1, 2, 3] and ident.removed_indices.size == 0


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 9, elements=st.floats(-10, 10, allow_nan=False)),
    st.integers(0, 8),
    st.floats(1e-3, 1e3),
)
def test_purge_plan_scale_invariant(delta, n_purge, c):
    a, b = purge_tokens(None, delta, n_purge), purge_tokens(None, delta * c, n_purge)
    # scaling can merge near-ties through rounding; only compare when ranks are unambiguous
    if len(np.unique(delta)) == len(np.unique(delta * c)):
        assert a.removed_indices.tolist() == b.removed_indices.tolist()


def _identity_block0(w):
    d = w.config.d
    b = w.block(0)
    b["ln1.gamma"][...] = 1.0
    b["ln1.beta"][...] = 0.0
    b["attn.w_q"][...] = np.eye(d)
    b["attn.w_k"][...] = np.eye(d)
    return w


def test_cls_prototype_identity_query_is_normalized_cls():
    w = _identity_block0(init_weights(SMALL, 2))
    cls = w.params["cls_token"]
    expected = (cls - cls.mean()) / np.sqrt(cls.var() + SMALL.ln_eps)
    np.testing.assert_allclose(cls_prototype(w), expected, rtol=1e-12)
    np.testing.assert_array_equal(cls_prototype(w), cls_prototype(w))


def test_cls_prototype_ignores_test_data():
    w = init_weights(SMALL, 2)
    before = cls_prototype(w)
    CosineGate(w, 2).scores(np.random.default_rng(0).standard_normal((3, SMALL.n_tokens, SMALL.d)))
    np.testing.assert_array_equal(before, cls_prototype(w))


def test_cosine_parallel_orthogonal_antiparallel():
    w = _identity_block0(init_weights(SMALL, 2))
    # zero-mean, unit-variance tokens are fixed points of the identity LayerNorm (up to eps)
    g = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
    ortho = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float)
    d = cosine_divergence(np.stack([g, ortho, -g]), g, w)
    np.testing.assert_allclose(d, [-1.0, 0.0, 1.0], atol=1e-12)


def test_welford_worked_examples():
    one = np.random.default_rng(1).standard_normal((5, 3))
    s = welford_collect([one])
    np.testing.assert_allclose(s.mu, one.mean(0), rtol=1e-15)
    np.testing.assert_allclose(s.sigma, one.std(0), rtol=1e-15)
    s = welford_collect([np.full((4, 1), m) for m in (1.0, 2.0, 3.0)])
    assert s.mu[0] == pytest.approx(2.0, abs=1e-15) and s.n_samples == 3
