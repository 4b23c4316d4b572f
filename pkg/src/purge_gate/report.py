"""Aggregate TTA summaries from several runs into one accuracy table.

Rows are variants (source-only first), columns are corruptions followed by
the mean; purging rows also show the change of the mean over source-only.
Several runs of the same (variant, corruption) become ``mean ± std``. A row
missing some corruption gets an empty cell, its mean covers the present cells
only and it is flagged ``incomplete``.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from purge_gate.errors import FormatError

ROW_ORDER = ("source_only", "pg_sp", "pg_sf")
REQUIRED_KEYS = ("variant", "corruption", "accuracy")


def find_summaries(run_dirs) -> list[dict]:
    found = []
    for run in run_dirs:
        run = Path(run)
        paths = [run] if run.is_file() else sorted(run.rglob("*.summary.json"))
        for path in paths:
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: {exc}") from None
            missing = [k for k in REQUIRED_KEYS if k not in data]
            if missing:
                raise FormatError(f"{path}: not a TTA summary (missing {missing})")
            found.append(data)
    if not found:
        raise FormatError("no completed runs (*.summary.json) found")
    return found


def build_table(summaries: list[dict]) -> dict:
    cells = defaultdict(list)
    corruptions, variants = [], []
    for s in summaries:
        key = (s["variant"], s["corruption"])
        cells[key].append(100.0 * float(s["accuracy"]))
        if s["corruption"] not in corruptions:
            corruptions.append(s["corruption"])
        if s["variant"] not in variants:
            variants.append(s["variant"])
    variants.sort(key=lambda v: (ROW_ORDER.index(v) if v in ROW_ORDER else len(ROW_ORDER), v))
    rows = []
    for v in variants:
        row = {"variant": v, "cells": {}}
        for c in corruptions:
            vals = cells.get((v, c))
            if vals:
                row["cells"][c] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                    "n": len(vals),
                }
        present = [cell["mean"] for cell in row["cells"].values()]
        row["mean"] = float(np.mean(present)) if present else float("nan")
        row["incomplete"] = len(row["cells"]) < len(corruptions)
        rows.append(row)
    base = next((r for r in rows if r["variant"] == "source_only"), None)
    for r in rows:
        if base is not None and r is not base:
            shared = [c for c in r["cells"] if c in base["cells"]]
            if shared:
                r["improvement"] = float(
                    np.mean([r["cells"][c]["mean"] for c in shared]) - np.mean([base["cells"][c]["mean"] for c in shared])
                )
    return {"columns": corruptions, "rows": rows}


def _fmt_cell(cell):
    if cell is None:
        return ""
    if cell["n"] > 1:
        return f"{cell['mean']:.2f} ± {cell['std']:.2f}"
    return f"{cell['mean']:.2f}"


def table_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Method", *table["columns"], "Mean"])
    for r in table["rows"]:
        mean = f"{r['mean']:.2f}"
        if "improvement" in r:
            mean += f" ({r['improvement']:+.2f})"
        if r["incomplete"]:
            mean += " *"
        writer.writerow([r["variant"], *(_fmt_cell(r["cells"].get(c)) for c in table["columns"]), mean])
    if any(r["incomplete"] for r in table["rows"]):
        buf.write("# * mean over the corruptions present for this method only\n")
    return buf.getvalue()


def report(run_dirs, out_prefix=None) -> dict:
    table = build_table(find_summaries(run_dirs))
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.with_suffix(".json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
        out_prefix.with_suffix(".csv").write_text(table_csv(table), encoding="utf-8")
    return table
