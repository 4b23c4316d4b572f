import json

import pytest

from purge_gate.errors import ConfigError
from purge_gate.runconfig import RunConfig, derive_seed


def test_defaults_and_hash_stability():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert a.override(seed=1).hash() != a.hash()


def test_dict_round_trip(tmp_path):
    cfg = RunConfig(corruption="gaussian", severity=4, candidates=(0, 4, 2), seed=9)
    assert cfg.candidates == (0, 2, 4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(path) == cfg


@pytest.mark.parametrize("raw", [
    {"candidates": [0, 2, 32]},
    {"candidates": [2, 4]},
    {"model": {"n_tokens": 600}},
    {"model": {"k": 1000}},
    {"model": {"n_classes": 3}},
    {"corruption": "fog"},
    {"severity": 9},
    {"bn": "training2"},
    {"batch_size": 1},
    {"unknown": 1},
])
def test_cross_field_validation(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_seeds_split_per_purpose():
    seeds = {derive_seed(7, p) for p in ("data", "init", "corruption", "analysis")}
    assert len(seeds) == 4
    assert derive_seed(7, "data") == derive_seed(7, "data")
    assert all(0 <= s < 2**64 for s in seeds)
