"""Markdown summary of a run directory (ablation grid, metrics report, training history)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import plots
from .errors import DataError


def _fmt(v):
    if v in (None, ""):
        return "n/a"
    if isinstance(v, int) or (isinstance(v, str) and v.isdigit()):
        return str(v)
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return str(v)


def _markdown_table(rows, columns):
    head = "| " + " | ".join(columns) + " |"
    sep = "|" + "---|" * len(columns)
    body = ["| " + " | ".join(_fmt(r.get(c)) if c not in ("arm", "label") else str(r.get(c))
                            for c in columns) + " |" for r in rows]
    return "\n".join([head, sep, *body])


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(run_dir, out=None) -> Path:
    run = Path(run_dir)
    out = Path(out) if out else run / "report.md"
    parts = [f"# Run summary: {run.name}", ""]
    found = False
    if (run / "ablation_summary.csv").exists():
        found = True
        rows = _read_csv(run / "ablation_summary.csv")
        parts += ["## Sampling-strategy ablation (mean over seeds)", "",
                  _markdown_table(rows, ["label", "seeds_ok", "batch_knn", "graph_connectivity",
                                         "reproducibility_knn", "map", "recall_5", "recall_10",
                                         "collapse_final", "collapse_flagged_seeds"]), ""]
    if (run / "metrics.json").exists():
        found = True
        rep = json.loads((run / "metrics.json").read_text())
        parts += ["## Headline metrics", "", _markdown_table([rep["headline"]], list(rep["headline"])), ""]
    if (run / "history.csv").exists():
        found = True
        rows = _read_csv(run / "history.csv")
        hist = [{"step": int(r["step"]), "loss": float(r["loss"]), "collapse": float(r["collapse"])}
                for r in rows]
        svg = plots.history_svg(hist, out.parent / "history.svg")
        parts += ["## Training", "", f"{len(hist)} steps; final loss {hist[-1]['loss']:.4f}, "
                  f"final collapse indicator {hist[-1]['collapse']:.4f}", "", f"![history]({svg.name})", ""]
    if not found:
        raise DataError(f"{run}: no ablation, metrics or history files to summarize")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(parts))
    return out
