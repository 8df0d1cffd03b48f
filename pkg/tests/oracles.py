"""Brute-force reference implementations used to check the metrics module.

Everything here is plain Python loops over node pairs so it shares no code
path with the vectorized implementations.
"""

import math
from collections import defaultdict


def cosine_distance(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    d = 1.0 - dot / (na * nb)
    return round(min(max(d, 0.0), 2.0), 12)


def distance_rows(X):
    rows = [list(map(float, r)) for r in X]
    return [[cosine_distance(rows[i], rows[j]) for j in range(len(rows))] for i in range(len(rows))]


def knn(X, k):
    D = distance_rows(X)
    out = []
    for i in range(len(D)):
        cand = sorted((D[i][j], j) for j in range(len(D)) if j != i)
        out.append(cand[:k])
    return out


def vote(labels_in_order):
    counts = defaultdict(int)
    for lab in labels_in_order:
        counts[lab] += 1
    best = max(counts.values())
    tied = [lab for lab in counts if counts[lab] == best]
    for lab in labels_in_order:
        if lab in tied:
            return lab


def knn_accuracy(X, labels, k, queries=None):
    nb = knn(X, k)
    queries = range(len(labels)) if queries is None else queries
    hits = 0
    total = 0
    for i in queries:
        total += 1
        if vote([labels[j] for _, j in nb[i]]) == labels[i]:
            hits += 1
    return hits / total


def mean_average_precision(X, labels, queries=None):
    D = distance_rows(X)
    n = len(labels)
    queries = range(n) if queries is None else queries
    aps = []
    for q in queries:
        if sum(1 for j in range(n) if j != q and labels[j] == labels[q]) == 0:
            continue
        ranked = sorted((D[q][j], j) for j in range(n) if j != q)
        found, precisions = 0, []
        for rank, (_, j) in enumerate(ranked, start=1):
            if labels[j] == labels[q]:
                found += 1
                precisions.append(found / rank)
        aps.append(math.fsum(precisions) / len(precisions))
    return math.fsum(aps) / len(aps)


def graph_connectivity(X, batches, k):
    nb = knn(X, k)
    adj = defaultdict(set)
    for i, row in enumerate(nb):
        for _, j in row:
            adj[i].add(j)
            adj[j].add(i)
    ratios = []
    for b in sorted(set(batches)):
        nodes = [i for i in range(len(batches)) if batches[i] == b]
        members = set(nodes)
        seen, best = set(), 0
        for start in nodes:
            if start in seen:
                continue
            stack, size = [start], 0
            seen.add(start)
            while stack:
                u = stack.pop()
                size += 1
                for v in adj[u]:
                    if v in members and v not in seen:
                        seen.add(v)
                        stack.append(v)
            best = max(best, size)
        ratios.append(best / len(nodes))
    return sum(ratios) / len(ratios)


def recall_precision(pred_edges, truth_edges, genes_pred, genes_truth):
    shared = set(genes_pred) & set(genes_truth)
    norm = lambda es: {tuple(sorted(e)) for e in es if e[0] != e[1] and e[0] in shared and e[1] in shared}
    p, t = norm(pred_edges), norm(truth_edges)
    hit = len(p & t)
    return hit / len(t), (hit / len(p) if p else 0.0)


def percentile_linear(values, q):
    """Linear-interpolation percentile over the sorted list (numpy's default method)."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def top_percent_edges(X, genes, p):
    n = len(genes)
    sims = {}
    for i in range(n):
        for j in range(i + 1, n):
            a, b = list(map(float, X[i])), list(map(float, X[j]))
            dot = sum(x * y for x, y in zip(a, b))
            sims[(genes[i], genes[j])] = dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
    thr = percentile_linear(list(sims.values()), 100 - p)
    return {e for e, s in sims.items() if s >= thr - 1e-12}


def ks_statistic(a, b):
    pts = sorted(set(a) | set(b))
    best = 0.0
    for x in pts:
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best
