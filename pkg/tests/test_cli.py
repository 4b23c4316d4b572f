import json

import pytest

from purge_gate.cli import main

CFG = {"data": {"train_per_class": 6, "test_per_class": 3, "n_points": 128}, "trainer": {"epochs": 1}}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**CFG, "out_dir": str(root / "run")}))
    assert main(["-q", "gen-data", "--config", str(cfg)]) == 0
    assert main(["-q", "pretrain", "--config", str(cfg)]) == 0
    assert main(["-q", "collect-stats", "--config", str(cfg), "--weights", str(root / "run" / "weights.pgw")]) == 0
    return root


def _eval(root, out, *extra):
    return main(["-q", "tta-eval", "--config", str(root / "cfg.json"), "--weights", str(root / "run" / "weights.pgw"),
                 "--out", str(root / out), *extra])


def test_pipeline_outputs_and_idempotence(run_dir):
    assert _eval(run_dir, "a.csv", "--variant", "sp", "--corruption", "background", "--severity", "3") == 0
    assert _eval(run_dir, "b.csv", "--variant", "sp", "--corruption", "background", "--severity", "3") == 0
    a, b = (run_dir / "a.csv").read_text(), (run_dir / "b.csv").read_text()
    assert a == b and a.startswith("# config_hash: ")
    summary = json.loads((run_dir / "a.summary.json").read_text())
    assert summary["variant"] == "pg_sp" and summary["config_hash"] in a.splitlines()[0]


def test_gen_data_is_byte_identical(run_dir, tmp_path):
    data = run_dir / "run" / "data" / "train.npz"
    first = data.read_bytes()
    assert main(["-q", "gen-data", "--config", str(run_dir / "cfg.json")]) == 0
    assert data.read_bytes() == first


def test_report_subcommand(run_dir, capsys):
    assert _eval(run_dir, "r/so.csv", "--variant", "none", "--corruption", "gaussian", "--severity", "1") == 0
    assert _eval(run_dir, "r/sf.csv", "--variant", "sf", "--corruption", "gaussian", "--severity", "1") == 0
    capsys.readouterr()
    assert main(["report", str(run_dir / "r"), "--out", str(run_dir / "table")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "Method,gaussian,Mean"
    assert (run_dir / "table.csv").exists() and (run_dir / "table.json").exists()


def test_exit_codes(run_dir, tmp_path):
    assert _eval(run_dir, "x.csv", "--candidates", "0,32") == 2
    assert _eval(run_dir, "x.csv", "--candidates", "2,4") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["-q", "gen-data", "--config", str(bad)]) == 2
    assert main(["-q", "tta-eval", "--weights", str(tmp_path / "missing.pgw"), "--out", str(tmp_path / "o.csv")]) == 4
    junk = tmp_path / "junk.pgw"
    junk.write_bytes(b"nope")
    assert main(["-q", "tta-eval", "--weights", str(junk), "--out", str(tmp_path / "o.csv")]) == 4
    assert main(["-q", "report", str(tmp_path)]) == 4
    nan_cfg = tmp_path / "nan.json"
    nan_cfg.write_text(json.dumps({**CFG, "out_dir": str(run_dir / "run"), "trainer": {"epochs": 2, "lr": 1e200, "grad_clip": 1e300}}))
    assert main(["-q", "pretrain", "--config", str(nan_cfg), "--out", str(tmp_path / "n.pgw")]) == 3


def test_analyze_outputs(run_dir):
    out = run_dir / "lip.csv"
    assert main(["-q", "analyze", "lipschitz", "--pairs", "500", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config_hash: ") and lines[1].startswith("pair_kind,")
    sweep = run_dir / "sweep.csv"
    assert main(["-q", "analyze", "sweep", "--config", str(run_dir / "cfg.json"), "--weights",
                 str(run_dir / "run" / "weights.pgw"), "--corruption", "background", "--severity", "2",
                 "--out", str(sweep)]) == 0
    assert len(sweep.read_text().splitlines()) == 2 + 32
    assert main(["-q", "analyze", "uniformity"]) == 2


def test_corruptions_describe(capsys):
    assert main(["corruptions", "--describe"]) == 0
    assert "background" in json.loads(capsys.readouterr().out)["kinds"]
