"""Evaluation: batch effect, reproducibility and biological recall.

Every metric works on rows sorted by their key, so the row order of an
input table never changes a result. Cosine distances are rounded to 12
decimals before ranking; equal distances are then ordered by ascending
node id (the position in key order).
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components

from .errors import NumericError, ShapeError, UndefinedMetricError

log = logging.getLogger(__name__)

DIST_DECIMALS = 12


@dataclass
class NeighborGraph:
    keys: list  # node keys in canonical order; node id = position
    neighbors: np.ndarray  # [N, k] node ids, nearest first
    distances: np.ndarray  # [N, k]
    k: int
    meta: pd.DataFrame | None = None

    def __len__(self):
        return len(self.keys)

    def labels(self, column: str) -> np.ndarray:
        if self.meta is None:
            raise ShapeError("graph has no metadata")
        return self.meta[column].to_numpy()

    def undirected_edges(self) -> set:
        edges = set()
        for i, row in enumerate(self.neighbors):
            for j in row:
                edges.add((min(i, int(j)), max(i, int(j))))
        return edges


@dataclass
class RelationGraph:
    genes: list
    edges: set  # {(a, b)} with a < b
    source: str = "ground_truth"
    threshold: float | None = None

    def __post_init__(self):
        self.genes = sorted(set(self.genes))
        self.edges = {_edge(a, b) for a, b in self.edges if a != b}

    def restrict(self, genes) -> "RelationGraph":
        keep = set(genes)
        return RelationGraph(sorted(keep & set(self.genes)),
                             {e for e in self.edges if e[0] in keep and e[1] in keep},
                             self.source, self.threshold)

    def adjacency(self, gene_order=None) -> np.ndarray:
        order = list(gene_order) if gene_order is not None else self.genes
        pos = {g: i for i, g in enumerate(order)}
        m = np.zeros((len(order), len(order)), dtype=np.int8)
        for a, b in self.edges:
            if a in pos and b in pos:
                m[pos[a], pos[b]] = m[pos[b], pos[a]] = 1
        return m


def _edge(a, b):
    return (a, b) if a < b else (b, a)


# ---- canonical features -------------------------------------------------------

def canonical(table):
    """``(unit-norm features, keys, meta)`` sorted by key, zero rows dropped."""
    if isinstance(table, np.ndarray):
        X = np.asarray(table, dtype=np.float64)
        keys = [(i,) for i in range(len(X))]
        meta = pd.DataFrame({"row": np.arange(len(X))})
    else:
        keys = table.keys
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        X = table.features[order]
        keys = [keys[i] for i in order]
        meta = table.meta.iloc[order].reset_index(drop=True)
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"dropping {int(zero.sum())} zero-norm row(s)", RuntimeWarning, stacklevel=3)
        X, norms = X[~zero], norms[~zero]
        keys = [k for k, z in zip(keys, zero) if not z]
        meta = meta.loc[~zero].reset_index(drop=True)
    return X / norms[:, None], keys, meta


def cosine_distances(unit) -> np.ndarray:
    d = 1.0 - unit @ unit.T
    return np.round(np.clip(d, 0.0, 2.0), DIST_DECIMALS)


def cosine_similarities(unit) -> np.ndarray:
    return np.clip(unit @ unit.T, -1.0, 1.0)


# ---- KNN --------------------------------------------------------------------

def knn_graph(table, k: int = 5) -> NeighborGraph:
    unit, keys, meta = canonical(table)
    n = len(keys)
    if n < k + 1:
        raise ShapeError(f"knn_graph needs at least k+1={k + 1} rows, got {n}")
    D = cosine_distances(unit)
    ids = np.arange(n)
    nbrs = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d = D[i].copy()
        d[i] = np.inf
        nbrs[i] = np.lexsort((ids, d))[:k]
    dists = np.take_along_axis(D, nbrs, axis=1)
    return NeighborGraph(keys, nbrs, dists, k, meta)


def _vote(neighbor_labels):
    counts = Counter(neighbor_labels)
    top = max(counts.values())
    for lab in neighbor_labels:  # nearest first: the first tied label wins
        if counts[lab] == top:
            return lab


def knn_predictions(graph: NeighborGraph, labels, k: int | None = None) -> list:
    labels = graph.labels(labels) if isinstance(labels, str) else np.asarray(labels)
    k = graph.k if k is None else k
    if k > graph.k:
        raise ShapeError(f"graph holds {graph.k} neighbors, asked for {k}")
    return [_vote([labels[j] for j in row[:k]]) for row in graph.neighbors]


def knn_accuracy(graph: NeighborGraph, labels, k: int | None = None, query_mask=None) -> float:
    """Fraction of query nodes whose majority neighbor label equals their own.

    ``labels`` is a metadata column name or a sequence aligned with the
    graph's node order. Vote ties go to the tied label met first among the
    distance-ordered neighbors.
    """
    labels = graph.labels(labels) if isinstance(labels, str) else np.asarray(labels)
    if len(labels) != len(graph):
        raise ShapeError("labels must cover every node")
    pred = knn_predictions(graph, labels, k)
    mask = np.ones(len(graph), bool) if query_mask is None else np.asarray(query_mask, bool)
    if not mask.any():
        raise UndefinedMetricError("no query nodes")
    hits = [pred[i] == labels[i] for i in np.flatnonzero(mask)]
    return float(np.mean(hits))


# ---- retrieval ----------------------------------------------------------------

def average_precisions(table, labels, query_mask=None) -> np.ndarray:
    """AP per query node (NaN for excluded queries), in canonical node order."""
    unit, keys, meta = canonical(table)
    labels = meta[labels].to_numpy() if isinstance(labels, str) else np.asarray(labels)
    n = len(keys)
    mask = np.ones(n, bool) if query_mask is None else np.asarray(query_mask, bool)
    if isinstance(query_mask, str):
        mask = meta[query_mask].to_numpy(bool)
    D = cosine_distances(unit)
    ids = np.arange(n)
    counts = Counter(labels.tolist())
    out = np.full(n, np.nan)
    singletons = 0
    for q in np.flatnonzero(mask):
        if counts[labels[q]] < 2:
            singletons += 1
            continue
        order = np.lexsort((ids, D[q]))
        order = order[order != q]
        rel = labels[order] == labels[q]
        ranks = np.flatnonzero(rel) + 1
        # exactly rounded sums keep AP independent of summation order
        out[q] = math.fsum((np.arange(1, len(ranks) + 1) / ranks).tolist()) / len(ranks)
    if singletons:
        warnings.warn(f"{singletons} query node(s) have no other node with their label",
                      RuntimeWarning, stacklevel=2)
    return out


def retrieval_map(table, labels, query_mask=None) -> float:
    """Mean average precision of retrieving same-label nodes by cosine distance.

    Non-query nodes (e.g. NTC rows) stay in the ranking as distractors.
    """
    ap = average_precisions(table, labels, query_mask)
    if np.all(np.isnan(ap)):
        raise UndefinedMetricError("no query node has a same-label partner")
    valid = ap[~np.isnan(ap)]
    return math.fsum(valid.tolist()) / len(valid)


# ---- batch effect -------------------------------------------------------------

def graph_connectivity(graph: NeighborGraph, batch_labels) -> float:
    """Mean over batches of largest-component size / batch size.

    KNN edges are symmetrized: i and j are linked if either lists the other.
    """
    labels = graph.labels(batch_labels) if isinstance(batch_labels, str) else np.asarray(batch_labels)
    n = len(graph)
    if len(labels) != n:
        raise ShapeError("batch labels must cover every node")
    rows = np.repeat(np.arange(n), graph.k)
    cols = graph.neighbors.ravel()
    ratios = []
    for b in sorted(set(labels.tolist())):
        nodes = np.flatnonzero(labels == b)
        if len(nodes) == 0:
            warnings.warn(f"batch {b} has no nodes", RuntimeWarning, stacklevel=2)
            continue
        local = -np.ones(n, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        keep = (local[rows] >= 0) & (local[cols] >= 0)
        adj = sparse.coo_matrix((np.ones(keep.sum()), (local[rows[keep]], local[cols[keep]])),
                                shape=(len(nodes), len(nodes)))
        _, comp = connected_components(adj, directed=True, connection="weak")
        ratios.append(np.bincount(comp).max() / len(nodes))
    if not ratios:
        raise UndefinedMetricError("no batches")
    return float(np.mean(ratios))


# ---- biological recall -------------------------------------------------------------

def _gene_units(consensus_table):
    unit, keys, meta = canonical(consensus_table)
    genes = [k[0] for k in keys]
    if "is_ntc" in meta.columns:
        keep = ~meta["is_ntc"].to_numpy(bool)
        unit, genes = unit[keep], [g for g, k in zip(genes, keep) if k]
    return unit, genes


def pair_similarities(consensus_table):
    """``(genes, i_idx, j_idx, similarities)`` over all unordered gene pairs."""
    unit, genes = _gene_units(consensus_table)
    S = cosine_similarities(unit)
    i, j = np.triu_indices(len(genes), k=1)
    return genes, i, j, S[i, j]


def _threshold_graph(genes, i, j, sims, p):
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    thr = float(np.percentile(sims, 100 - p, method="linear"))
    hit = sims >= thr
    edges = {(genes[a], genes[b]) for a, b in zip(i[hit], j[hit])}
    return RelationGraph(genes, edges, f"prediction@{p:g}", thr)


def relation_graph_from_profiles(consensus_table, p: float) -> RelationGraph:
    """Link gene pairs whose cosine similarity is in the top ``p`` percent.

    The threshold is the linearly interpolated (100 - p)-th percentile of all
    pairwise similarities; pairs equal to the threshold are kept.
    """
    genes, i, j, sims = pair_similarities(consensus_table)
    if len(genes) < 3:
        raise ShapeError("relation graph needs at least 3 genes")
    return _threshold_graph(genes, i, j, sims, p)


def recall_precision(pred: RelationGraph, truth: RelationGraph) -> tuple[float, float]:
    shared = set(pred.genes) & set(truth.genes)
    pred, truth = pred.restrict(shared), truth.restrict(shared)
    if not truth.edges:
        raise UndefinedMetricError("truth graph has no edges on the shared genes")
    hit = len(pred.edges & truth.edges)
    precision = hit / len(pred.edges) if pred.edges else 0.0
    return hit / len(truth.edges), precision


def pr_curve(consensus_table, truth: RelationGraph, percentiles=range(1, 21)) -> list:
    """``[(percentile, recall, precision)]``; recall is checked to be monotone."""
    genes, i, j, sims = pair_similarities(consensus_table)
    if len(genes) < 3:
        raise ShapeError("relation graph needs at least 3 genes")
    out, prev_edges = [], None
    for p in sorted(percentiles):
        pred = _threshold_graph(genes, i, j, sims, p)
        if prev_edges is not None and not prev_edges <= pred.edges:
            raise NumericError(f"edge sets not nested at percentile {p}")
        prev_edges = pred.edges
        r, pr = recall_precision(pred, truth)
        out.append((float(p), r, pr))
    return out


def similarity_separation(consensus_table, truth: RelationGraph, n_random: int | None = None,
                          rng=None):
    """KS statistic between truth-pair and non-truth-pair cosine similarities."""
    genes, i, j, sims = pair_similarities(consensus_table)
    truth = truth.restrict(genes)
    if not truth.edges:
        raise UndefinedMetricError("truth graph has no edges on the profiled genes")
    is_truth = np.array([(genes[a], genes[b]) in truth.edges for a, b in zip(i, j)], dtype=bool)
    t_sims, r_sims = sims[is_truth], sims[~is_truth]
    if n_random is not None and n_random < len(r_sims):
        rng = rng if rng is not None else np.random.default_rng(0)
        r_sims = r_sims[rng.choice(len(r_sims), size=n_random, replace=False)]
    if len(r_sims) == 0:
        raise UndefinedMetricError("no non-truth pairs")
    ks = float(stats.ks_2samp(t_sims, r_sims).statistic)
    return ks, t_sims, r_sims


def read_truth(path) -> RelationGraph:
    from .synthgen import read_edges_csv
    edges = read_edges_csv(path)
    genes = {g for e in edges for g in e}
    return RelationGraph(sorted(genes), set(edges), "ground_truth")


# ---- table-level metric bundles ---------------------------------------------------------

def profile_metrics(table, k: int = 5) -> dict:
    """Batch effect and reproducibility metrics on batch-level gene profiles.

    NTC rows stay in the graph and the rankings but are not queries for the
    perturbation metrics.
    """
    graph = knn_graph(table, k)
    perturbation_queries = ~graph.labels("is_ntc").astype(bool)
    _, _, meta = canonical(table)
    return {
        "batch_knn": knn_accuracy(graph, "batch_id"),
        "graph_connectivity": graph_connectivity(graph, "batch_id"),
        "reproducibility_knn": knn_accuracy(graph, "gene", query_mask=perturbation_queries),
        "map": retrieval_map(table, "gene", query_mask=~meta["is_ntc"].to_numpy(bool)),
    }


def pca_sweep(batch_gene_table, component_counts, k: int = 5) -> pd.DataFrame:
    """Metrics of :func:`profile_metrics` on the first ``c`` principal components."""
    from .profiles import fit_pca
    tf = fit_pca(batch_gene_table.features)
    rows = []
    for c in component_counts:
        if c < 1 or c > tf.n_components:
            raise ShapeError(f"component count {c} outside 1..{tf.n_components}")
        reduced = batch_gene_table.with_features(tf.transform(batch_gene_table.features, c))
        rows.append({"n_pcs": int(c), **profile_metrics(reduced, k)})
    return pd.DataFrame(rows, columns=["n_pcs", "reproducibility_knn", "map", "batch_knn",
                                       "graph_connectivity"])


def module_gene_order(genes, module_assignment=None) -> list:
    """Genes grouped by module (unassigned last), then by name."""
    if module_assignment is None:
        return sorted(genes)
    mod = dict(module_assignment)
    return sorted(genes, key=lambda g: (mod.get(g, -1) < 0, mod.get(g, -1), g))


@dataclass
class AdjacencyExport:
    csv_paths: list = field(default_factory=list)
    svg_path: object = None


def adjacency_export(graphs, gene_order, out_dir, names=None) -> AdjacencyExport:
    """Dense 0/1 CSV per graph (unit diagonal for display) and one SVG panel row."""
    from pathlib import Path
    from . import plots
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = names or [g.source.replace("@", "_") for g in graphs]
    res = AdjacencyExport()
    mats = []
    for g, name in zip(graphs, names):
        m = g.adjacency(gene_order)
        np.fill_diagonal(m, 1)
        mats.append(m)
        path = out / f"adjacency_{name}.csv"
        pd.DataFrame(m, index=list(gene_order), columns=list(gene_order)).to_csv(path)
        res.csv_paths.append(path)
    res.svg_path = plots.adjacency_svg(mats, names, out / "adjacency.svg")
    return res
