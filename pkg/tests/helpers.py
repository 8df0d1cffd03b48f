import numpy as np
import pandas as pd

from setdino.profiles import EmbeddingTable


def make_table(X, genes=None, batches=None, ntc=None, level="single_cell"):
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    meta = pd.DataFrame({
        "cell_id": np.arange(n),
        "gene": genes if genes is not None else [f"G{i % 4}" for i in range(n)],
        "batch_id": batches if batches is not None else [0] * n,
        "is_ntc": ntc if ntc is not None else [False] * n,
    })
    if level == "batch_gene":
        meta = meta.drop(columns="cell_id")
    if level == "consensus_gene":
        meta = meta[["gene", "is_ntc"]]
    return EmbeddingTable(X, meta, level, "test")


def random_instance(rng, n=None, d=None, n_labels=None, n_batches=None, ties=False):
    n = n or int(rng.integers(8, 61))
    d = d or int(rng.integers(2, 9))
    if ties:
        X = rng.integers(-2, 3, size=(n, d)).astype(float)
        X[np.all(X == 0, axis=1), 0] = 1.0
    else:
        X = rng.normal(size=(n, d))
    labels = [f"L{v}" for v in rng.integers(0, n_labels or int(rng.integers(2, 7)), size=n)]
    batches = rng.integers(0, n_batches or int(rng.integers(1, 5)), size=n).tolist()
    return X, labels, batches


def batch_axis_profiles(rng, genes=100, d=40, shift=2.2, noise=1.0, guides=4):
    """Per-guide batch-level profiles for two batches displaced by +-shift along axis 0.

    The batch axis is the top-variance direction. Guide-to-guide noise lives
    off that axis, and gene identity carries most of the norm, so at full rank
    a profile's neighbors include the same gene's guides from the other batch.
    """
    gene_vecs = rng.normal(size=(genes, d))
    gene_vecs[:, 0] *= 0.3
    rows, meta = [], {"guide_id": [], "gene": [], "batch_id": [], "is_ntc": []}
    for b, sign in enumerate((1.0, -1.0)):
        offset = np.zeros(d)
        offset[0] = sign * shift
        for g in range(genes):
            for q in range(guides):
                e = rng.normal(scale=noise, size=d)
                e[0] = 0.0
                rows.append(gene_vecs[g] + offset + e)
                meta["guide_id"].append(g * guides + q)
                meta["gene"].append(f"G{g:03d}")
                meta["batch_id"].append(b)
                meta["is_ntc"].append(False)
    return EmbeddingTable(np.array(rows), pd.DataFrame(meta), "batch_guide", "planted")
