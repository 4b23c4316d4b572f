import json

import numpy as np
import pytest

from purge_gate.errors import FormatError
from purge_gate.report import build_table, find_summaries, report, table_csv


def _write(d, name, variant, corruption, acc):
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.summary.json").write_text(json.dumps({"variant": variant, "corruption": corruption, "accuracy": acc}))


def test_single_run_table(tmp_path):
    _write(tmp_path, "a", "source_only", "background", 0.5)
    _write(tmp_path, "b", "pg_sp", "background", 0.75)
    table = report([tmp_path], tmp_path / "out")
    assert [r["variant"] for r in table["rows"]] == ["source_only", "pg_sp"]
    csv = (tmp_path / "out.csv").read_text().splitlines()
    assert csv[0] == "Method,background,Mean"
    assert csv[2] == "pg_sp,75.00,75.00 (+25.00)"
    assert json.loads((tmp_path / "out.json").read_text()) == table


def test_missing_cell_is_flagged(tmp_path):
    _write(tmp_path, "a", "source_only", "background", 0.5)
    _write(tmp_path, "b", "source_only", "gaussian", 0.7)
    _write(tmp_path, "c", "pg_sf", "gaussian", 0.8)
    text = table_csv(report([tmp_path]))
    row = [l for l in text.splitlines() if l.startswith("pg_sf")][0]
    assert row == "pg_sf,,80.00,80.00 (+10.00) *"
    assert text.splitlines()[-1].startswith("# *")


def test_two_seeds_mean_std_recomputed(tmp_path):
    _write(tmp_path / "s0", "x", "pg_sp", "uniform", 0.6)
    _write(tmp_path / "s1", "x", "pg_sp", "uniform", 0.7)
    cell = build_table(find_summaries([tmp_path / "s0", tmp_path / "s1"]))["rows"][0]["cells"]["uniform"]
    assert cell["mean"] == pytest.approx(65.0)
    assert cell["std"] == pytest.approx(np.std([60.0, 70.0], ddof=1))
    assert "65.00 ± 7.07" in table_csv(build_table(find_summaries([tmp_path])))


def test_schema_errors(tmp_path):
    with pytest.raises(FormatError):
        find_summaries([tmp_path])
    (tmp_path / "bad.summary.json").write_text(json.dumps({"variant": "pg_sp"}))
    with pytest.raises(FormatError):
        find_summaries([tmp_path])
