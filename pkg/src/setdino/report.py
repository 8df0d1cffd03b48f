"""Evaluation of a directory of profile tables into a metrics report."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy import sparse

from . import metrics, plots, profiles
from .errors import DataError, UndefinedMetricError

log = logging.getLogger(__name__)

HEADLINE = ("batch_knn", "graph_connectivity", "reproducibility_knn", "map",
            "recall_5", "recall_10", "curated_recall_5", "curated_recall_10")


def load_levels(tables_dir) -> dict:
    d = Path(tables_dir)
    out = {}
    for level in profiles.LEVEL_KEYS:
        if (d / f"{level}.json").exists():
            out[level] = profiles.load_table(d / level)
    return out


def write_levels(levels: dict, out_dir) -> dict:
    out = Path(out_dir)
    return {name: str(profiles.save_table(table, out / name)) for name, table in levels.items()}


def truth_gene_order(truth: metrics.RelationGraph, genes) -> list:
    """Genes grouped by connected component of the truth graph (modules first)."""
    genes = sorted(genes)
    pos = {g: i for i, g in enumerate(genes)}
    edges = [(pos[a], pos[b]) for a, b in truth.edges if a in pos and b in pos]
    if not edges:
        return genes
    rows, cols = zip(*edges)
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(genes), len(genes)))
    _, comp = connected_components(adj, directed=False)
    sizes = np.bincount(comp)
    first = {}
    for i, c in enumerate(comp):
        first.setdefault(c, i)
    return sorted(genes, key=lambda g: (sizes[comp[pos[g]]] == 1, first[comp[pos[g]]], g))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def default_pca_counts(rank: int) -> list:
    counts = [c for c in (1, 2, 4, 8, 16, 32, 64, 128, 256) if c < rank]
    return counts + [rank]


def recall_block(consensus, truth, name, out_dir, percentiles, gene_order=None) -> dict:
    genes = {k[0] for k in consensus.keys}
    unmatched = sorted({g for e in truth.edges for g in e} - genes)
    curve = metrics.pr_curve(consensus, truth, sorted(set(percentiles) | {5, 10}))
    by_p = {p: (r, pr) for p, r, pr in curve}
    _write_rows(Path(out_dir) / f"pr_curve_{name}.csv", ["percentile", "recall", "precision"],
                [row for row in curve if row[0] in set(percentiles)])
    ks, t_sims, r_sims = metrics.similarity_separation(consensus, truth)
    plots.similarity_svg(t_sims, r_sims, ks, Path(out_dir) / f"similarity_{name}.svg", name)
    order = gene_order or truth_gene_order(truth, genes)
    graphs = [truth.restrict(genes), metrics.relation_graph_from_profiles(consensus, 5),
              metrics.relation_graph_from_profiles(consensus, 10)]
    metrics.adjacency_export(graphs, order, Path(out_dir) / f"adjacency_{name}",
                             names=["truth", "top5", "top10"])
    return {
        "recall_5": by_p[5][0], "precision_5": by_p[5][1],
        "recall_10": by_p[10][0], "precision_10": by_p[10][1],
        "ks": ks, "n_truth_edges": len(truth.restrict(genes).edges),
        "unmatched_truth_genes": unmatched,
        "pr_curve": [[p, r, pr] for p, r, pr in curve if p in set(percentiles)],
    }


def evaluate_levels(levels: dict, truth_csv, out_dir, curated_csv=None, k: int = 5,
                    percentiles=range(1, 21), pca_components=None) -> dict:
    """Compute every metric and write report files; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for need in ("batch_gene", "consensus_gene"):
        if need not in levels:
            raise DataError(f"missing {need} table")
    bg, cons = levels["batch_gene"], levels["consensus_gene"]
    percentiles = [int(p) for p in percentiles]

    report = {"provenance": bg.provenance, "k": k, "n_batch_gene_rows": len(bg),
              "n_genes": len(cons)}
    report.update(metrics.profile_metrics(bg, k))

    truths = {"truth": metrics.read_truth(truth_csv)}
    if curated_csv is not None:
        truths["curated"] = metrics.read_truth(curated_csv)
    genes = {kk[0] for kk in cons.keys}
    curves = {}
    for name, truth in truths.items():
        truth_genes = {g for e in truth.edges for g in e}
        if not truth.edges:
            raise UndefinedMetricError(f"{name} truth has no edges")
        if not truth_genes & genes:
            raise DataError(f"no {name} truth gene has a profile; unmatched: "
                            + ", ".join(sorted(truth_genes)[:20]))
        block = recall_block(cons, truth, name, out, percentiles)
        if block["unmatched_truth_genes"]:
            log.warning("%s truth genes without profiles: %s", name,
                        ", ".join(block["unmatched_truth_genes"]))
        prefix = "" if name == "truth" else "curated_"
        report[f"{prefix}recall_5"] = block["recall_5"]
        report[f"{prefix}recall_10"] = block["recall_10"]
        report[name] = block
        curves[name] = block["pr_curve"]
    report.setdefault("curated_recall_5", None)
    report.setdefault("curated_recall_10", None)
    plots.pr_curve_svg(curves, out / "pr_curve.svg")

    rank = profiles.fit_pca(bg.features).n_components
    counts = pca_components or default_pca_counts(rank)
    counts = [c for c in counts if c <= rank]
    sweep = metrics.pca_sweep(bg, counts, k)
    sweep.to_csv(out / "pca_sweep.csv", index=False, float_format="%r")
    plots.pca_sweep_svg(sweep, out / "pca_sweep.svg")
    report["pca_sweep"] = sweep.to_dict(orient="list")
    report["headline"] = {h: report[h] for h in HEADLINE}
    (out / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def evaluate_tables(tables_dir, truth_csv, out_dir, curated_csv=None, **kwargs) -> dict:
    return evaluate_levels(load_levels(tables_dir), truth_csv, out_dir, curated_csv, **kwargs)


def headline_table(report: dict) -> str:
    width = max(len(h) for h in HEADLINE)
    lines = []
    for h in HEADLINE:
        v = report["headline"][h]
        lines.append(f"{h:<{width}}  {'n/a' if v is None else f'{v:.4f}'}")
    return "\n".join(lines)
