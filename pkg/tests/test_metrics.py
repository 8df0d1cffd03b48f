import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from helpers import make_table, random_instance
from setdino import metrics
from setdino.errors import ShapeError, UndefinedMetricError
from setdino.metrics import RelationGraph


def _graph_matches_oracle(X, k):
    g = metrics.knn_graph(make_table(X), k)
    ref = oracles.knn(X, k)
    assert [[j for _, j in row] for row in ref] == g.neighbors.tolist()
    np.testing.assert_allclose([[d for d, _ in row] for row in ref], g.distances, atol=1e-12)


# ---- knn_graph --------------------------------------------------------------

def test_orthogonal_vectors_neighbor_at_distance_one():
    g = metrics.knn_graph(make_table(np.eye(3)), k=1)
    np.testing.assert_allclose(g.distances, 1.0)
    assert g.neighbors.ravel().tolist() == [1, 0, 0]  # ties resolved by lowest id


def test_duplicated_rows_are_mutual_nearest():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 4))
    X[5] = X[2]
    g = metrics.knn_graph(make_table(X), k=1)
    assert g.neighbors[2, 0] == 5 and g.neighbors[5, 0] == 2
    assert g.distances[2, 0] == pytest.approx(0.0, abs=1e-12)


def test_never_own_neighbor_and_sorted():
    rng = np.random.default_rng(2)
    g = metrics.knn_graph(make_table(rng.normal(size=(30, 5))), k=5)
    for i, row in enumerate(g.neighbors):
        assert i not in row
    assert np.all(np.diff(g.distances, axis=1) >= 0)
    assert g.distances.min() >= 0 and g.distances.max() <= 2


def test_too_few_rows():
    with pytest.raises(ShapeError):
        metrics.knn_graph(make_table(np.eye(3)), k=3)


def test_zero_rows_dropped_with_warning():
    X = np.vstack([np.eye(4), np.zeros((1, 4))])
    with pytest.warns(RuntimeWarning):
        g = metrics.knn_graph(make_table(X), k=1)
    assert len(g) == 4


@pytest.mark.parametrize("seed", range(20))
def test_knn_graph_oracle(seed):
    rng = np.random.default_rng(seed)
    X, _, _ = random_instance(rng, ties=seed % 2 == 0)
    _graph_matches_oracle(X, k=min(5, len(X) - 1))


# ---- knn_accuracy -----------------------------------------------------------

def test_perfect_clusters():
    rng = np.random.default_rng(3)
    centers = np.eye(4) * 10
    X = np.repeat(centers, 8, axis=0) + rng.normal(scale=0.1, size=(32, 4))
    labels = np.repeat(list("abcd"), 8)
    g = metrics.knn_graph(make_table(X, genes=labels), k=5)
    assert metrics.knn_accuracy(g, "gene") == 1.0


def test_single_class():
    rng = np.random.default_rng(4)
    g = metrics.knn_graph(make_table(rng.normal(size=(12, 3))), k=5)
    assert metrics.knn_accuracy(g, ["x"] * 12) == 1.0


def test_random_labels_near_chance():
    rng = np.random.default_rng(5)
    n, C = 600, 4
    X = rng.normal(size=(n, 6))
    labels = rng.integers(0, C, size=n)
    acc = metrics.knn_accuracy(metrics.knn_graph(make_table(X), k=5), labels)
    # binomial bound around 1/C
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 1 / C) <= 3 * sigma + 0.02


def test_vote_tie_goes_to_nearest_label():
    # neighbors of node 0 in distance order carry labels b, a, a, b -> tie 2:2, nearest is b
    X = np.array([[1, 0], [1, 0.1], [1, 0.2], [1, 0.3], [1, 0.4], [-1, 0]], dtype=float)
    labels = ["b", "b", "a", "a", "b", "z"]
    g = metrics.knn_graph(make_table(X), k=4)
    assert metrics.knn_predictions(g, labels)[0] == "b"


@pytest.mark.parametrize("seed", range(20))
def test_knn_accuracy_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    X, labels, batches = random_instance(rng, ties=seed % 3 == 0)
    k = min(5, len(X) - 1)
    g = metrics.knn_graph(make_table(X), k)
    assert metrics.knn_accuracy(g, labels) == oracles.knn_accuracy(X, labels, k)
    assert metrics.knn_accuracy(g, batches) == oracles.knn_accuracy(X, batches, k)


# ---- retrieval_map ------------------------------------------------------------

def test_map_perfect_pairs():
    X = np.array([[1, 0], [1, 0.1], [0, 1], [0.1, 1]], dtype=float)
    assert metrics.retrieval_map(make_table(X), ["a", "a", "b", "b"]) == 1.0


def test_ap_second_of_three():
    # query 0: nearest is node 1 (other label), relevant node 2 ranks second
    X = np.array([[1, 0], [1, 0.1], [1, 0.5]], dtype=float)
    ap = metrics.average_precisions(make_table(X), ["q", "x", "q"], query_mask=[True, False, False])
    assert ap[0] == pytest.approx(0.5)


def test_singletons_excluded():
    X = np.array([[1, 0], [1, 0.1], [0, 1]], dtype=float)
    with pytest.warns(RuntimeWarning):
        assert metrics.retrieval_map(make_table(X), ["a", "a", "b"]) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_map_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    X, labels, _ = random_instance(rng, n=40, ties=seed % 3 == 0)
    counts = {lab: labels.count(lab) for lab in labels}
    queries = [i for i in range(len(labels)) if counts[labels[i]] >= 2 and i % 3]
    mask = np.zeros(len(labels), bool)
    mask[queries] = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = metrics.retrieval_map(make_table(X), labels, query_mask=mask)
    assert got == oracles.mean_average_precision(X, labels, queries)


# ---- graph connectivity ---------------------------------------------------------

def test_gc_fully_connected_batches():
    rng = np.random.default_rng(6)
    X = np.vstack([rng.normal(size=(6, 3)) * 0.01 + [5, 0, 0], rng.normal(size=(6, 3)) * 0.01 + [0, 5, 0]])
    g = metrics.knn_graph(make_table(X), k=3)
    assert metrics.graph_connectivity(g, [0] * 6 + [1] * 6) == 1.0


def test_gc_mixed_batches_isolated_nodes():
    # 2 batches x 3 nodes; each node's nearest neighbor is in the other batch
    X = np.array([[1, 0], [1, 0.01], [0, 1], [0.01, 1], [-1, 0], [-1, 0.01]], dtype=float)
    batches = [0, 1, 0, 1, 0, 1]
    g = metrics.knn_graph(make_table(X), k=1)
    assert metrics.graph_connectivity(g, batches) == pytest.approx(1 / 3)


def test_gc_single_node_batch():
    X = np.array([[1, 0], [1, 0.1], [0, 1]], dtype=float)
    g = metrics.knn_graph(make_table(X), k=1)
    assert metrics.graph_connectivity(g, [0, 0, 1]) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_gc_oracle(seed):
    rng = np.random.default_rng(300 + seed)
    X, _, batches = random_instance(rng, ties=seed % 2 == 1)
    k = min(5, len(X) - 1)
    g = metrics.knn_graph(make_table(X), k)
    assert metrics.graph_connectivity(g, batches) == pytest.approx(
        oracles.graph_connectivity(X, batches, k), abs=1e-15)


# ---- relation graphs and recall ---------------------------------------------------------

def _consensus(X, genes=None):
    genes = genes or [f"G{i:02d}" for i in range(len(X))]
    return make_table(X, genes=genes, level="consensus_gene")


def test_p100_complete_graph():
    rng = np.random.default_rng(7)
    g = metrics.relation_graph_from_profiles(_consensus(rng.normal(size=(6, 3))), 100)
    assert len(g.edges) == 15


def test_top_pair_from_hand_similarities():
    # 4 genes; pair (G00, G01) is the single most similar
    X = np.array([[1, 0, 0], [0.99, 0.1, 0], [0, 1, 0], [0, 0.3, 1]])
    pairs = 6
    g = metrics.relation_graph_from_profiles(_consensus(X), 100 / pairs)
    assert g.edges == {("G00", "G01")}


def test_identical_profiles_keep_every_pair():
    g = metrics.relation_graph_from_profiles(_consensus(np.ones((5, 3))), 10)
    assert len(g.edges) == 10


def test_relation_graph_oracle():
    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        X = rng.normal(size=(15, 4))
        genes = [f"G{i:02d}" for i in range(15)]
        for p in (1, 5, 10, 20):
            got = metrics.relation_graph_from_profiles(_consensus(X, genes), p).edges
            assert got == oracles.top_percent_edges(X, genes, p)


def test_recall_precision_examples():
    genes = [f"g{i}" for i in range(20)]
    truth = RelationGraph(genes, {(genes[0], genes[i]) for i in range(1, 20)}
                          | {(genes[1], genes[i]) for i in range(2, 23) if i < 20 and len({}) == 0})
    assert metrics.recall_precision(truth, truth) == (1.0, 1.0)
    complete = RelationGraph(genes, {(a, b) for i, a in enumerate(genes) for b in genes[i + 1:]})
    r, p = metrics.recall_precision(complete, truth)
    assert r == 1.0 and p == pytest.approx(len(truth.edges) / 190)


def test_recall_precision_set_arithmetic():
    genes = [f"g{i:02d}" for i in range(30)]
    all_pairs = [(a, b) for i, a in enumerate(genes) for b in genes[i + 1:]]
    truth = RelationGraph(genes, set(all_pairs[:40]))
    pred = RelationGraph(genes, set(all_pairs[20:70]))
    assert metrics.recall_precision(pred, truth) == (0.5, 0.4)


def test_empty_truth_undefined():
    g = RelationGraph(["a", "b"], {("a", "b")})
    with pytest.raises(UndefinedMetricError):
        metrics.recall_precision(g, RelationGraph(["a", "b"], set()))


def test_self_edges_ignored():
    g = RelationGraph(["a", "b"], {("a", "a"), ("b", "a")})
    assert g.edges == {("a", "b")}


@pytest.mark.parametrize("seed", range(10))
def test_recall_precision_oracle(seed):
    rng = np.random.default_rng(500 + seed)
    genes_p = [f"g{i}" for i in rng.permutation(25)[:20]]
    genes_t = [f"g{i}" for i in rng.permutation(25)[:20]]
    pick = lambda gs, m: {tuple(rng.choice(gs, 2, replace=False)) for _ in range(m)}
    pe, te = pick(genes_p, 30), pick(genes_t, 25)
    pred, truth = RelationGraph(genes_p, pe), RelationGraph(genes_t, te)
    try:
        ref = oracles.recall_precision(pe, te, genes_p, genes_t)
    except ZeroDivisionError:
        with pytest.raises(UndefinedMetricError):
            metrics.recall_precision(pred, truth)
        return
    assert metrics.recall_precision(pred, truth) == ref


def test_pr_curve_shape_and_monotone():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(20, 5))
    genes = [f"G{i:02d}" for i in range(20)]
    truth = RelationGraph(genes, {(genes[i], genes[i + 1]) for i in range(19)})
    curve = metrics.pr_curve(_consensus(X, genes), truth)
    assert [p for p, _, _ in curve] == list(range(1, 21))
    recalls = [r for _, r, _ in curve]
    assert recalls == sorted(recalls)


def test_random_truth_precision_near_density():
    rng = np.random.default_rng(9)
    G = 60
    genes = [f"G{i:02d}" for i in range(G)]
    pairs = [(a, b) for i, a in enumerate(genes) for b in genes[i + 1:]]
    density = 0.1
    precisions = {p: [] for p in (5, 10, 20)}
    for _ in range(20):
        truth = RelationGraph(genes, {pairs[i] for i in np.flatnonzero(rng.random(len(pairs)) < density)})
        curve = metrics.pr_curve(_consensus(rng.normal(size=(G, 6)), genes), truth, [5, 10, 20])
        for p, _, prec in curve:
            precisions[p].append(prec)
    for p, vals in precisions.items():
        n_pred = len(pairs) * p / 100
        sigma = math.sqrt(density * (1 - density) / n_pred / len(vals))
        assert abs(np.mean(vals) - density) <= 3 * sigma + 0.005


# ---- KS separation ------------------------------------------------------------------

def test_ks_extremes():
    genes = ["a", "b", "c", "d"]
    X = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    truth = RelationGraph(genes, {("a", "b"), ("c", "d")})
    ks, t, r = metrics.similarity_separation(_consensus(X, genes), truth)
    assert ks == pytest.approx(1.0)
    assert np.allclose(t, 1.0) and np.allclose(r, 0.0)


def test_ks_matches_oracle_and_null():
    rng = np.random.default_rng(10)
    G = 50
    genes = [f"G{i:02d}" for i in range(G)]
    pairs = [(a, b) for i, a in enumerate(genes) for b in genes[i + 1:]]
    truth = RelationGraph(genes, {pairs[i] for i in rng.choice(len(pairs), 600, replace=False)})
    ks, t, r = metrics.similarity_separation(_consensus(rng.normal(size=(G, 8)), genes), truth)
    assert ks == pytest.approx(oracles.ks_statistic(list(t), list(r)), abs=1e-12)
    assert ks < 0.1
    assert 0.0 <= ks <= 1.0


def test_ks_same_sample_zero():
    from scipy import stats
    x = np.random.default_rng(11).normal(size=50)
    assert stats.ks_2samp(x, x).statistic == 0.0


# ---- invariances ------------------------------------------------------------------------

def _all_metrics(table, k=5):
    g = metrics.knn_graph(table, k)
    return (g.neighbors.tolist(), metrics.knn_accuracy(g, "gene"), metrics.knn_accuracy(g, "batch_id"),
            metrics.retrieval_map(table, "gene"), metrics.graph_connectivity(g, "batch_id"))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_row_shuffle_invariance(seed):
    rng = np.random.default_rng(seed)
    X, labels, batches = random_instance(rng, n_labels=3, ties=seed % 2 == 0)
    table = make_table(X, genes=labels, batches=batches)
    perm = rng.permutation(len(X))
    shuffled = table.take(perm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert _all_metrics(table) == _all_metrics(shuffled)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
@settings(max_examples=25, deadline=None)
def test_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    X, labels, batches = random_instance(rng, n_labels=3)
    a = make_table(X, genes=labels, batches=batches)
    b = make_table(X * scale, genes=labels, batches=batches)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ma, mb = _all_metrics(a), _all_metrics(b)
    assert ma[0] == mb[0]
    np.testing.assert_allclose(ma[1:], mb[1:], atol=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    X, labels, batches = random_instance(rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, *vals = _all_metrics(make_table(X, genes=labels, batches=batches), k=3)
    assert all(0.0 <= v <= 1.0 for v in vals)


# ---- PCA sweep and adjacency ---------------------------------------------------------------

def test_pca_sweep_batch_direction():
    from helpers import batch_axis_profiles
    table = batch_axis_profiles(np.random.default_rng(12))
    sweep = metrics.pca_sweep(table, [1, 2, 40])
    assert list(sweep.columns) == ["n_pcs", "reproducibility_knn", "map", "batch_knn", "graph_connectivity"]
    assert np.all(np.isfinite(sweep.to_numpy(dtype=float)))
    assert sweep.loc[0, "batch_knn"] > sweep.loc[2, "batch_knn"]
    assert sweep.loc[0, "reproducibility_knn"] < sweep.loc[2, "reproducibility_knn"]


def test_pca_sweep_rejects_excess_components():
    from helpers import batch_axis_profiles
    table = batch_axis_profiles(np.random.default_rng(13), genes=3, d=4)
    with pytest.raises(ShapeError):
        metrics.pca_sweep(table, [5])


def test_adjacency_export(tmp_path):
    genes = ["a", "b", "c", "d"]
    g1 = RelationGraph(genes, {("a", "b"), ("c", "d")})
    empty = RelationGraph(genes, set(), "prediction@5")
    res = metrics.adjacency_export([g1, empty], ["d", "c", "b", "a"], tmp_path, ["truth", "empty"])
    import pandas as pd
    m = pd.read_csv(res.csv_paths[0], index_col=0).to_numpy()
    assert (m == m.T).all() and (np.diag(m) == 1).all()
    assert m[0, 1] == 1 and m[0, 2] == 0
    e = pd.read_csv(res.csv_paths[1], index_col=0).to_numpy()
    assert (e == np.eye(4)).all()
    assert res.svg_path.read_text().startswith("<?xml")
    # the metric view keeps self-edges out
    assert np.diag(g1.adjacency(genes)).sum() == 0


def test_svg_bytes_reproducible(tmp_path):
    genes = ["a", "b", "c"]
    g = RelationGraph(genes, {("a", "b")})
    p1 = metrics.adjacency_export([g], genes, tmp_path / "1").svg_path.read_bytes()
    p2 = metrics.adjacency_export([g], genes, tmp_path / "2").svg_path.read_bytes()
    assert p1 == p2
