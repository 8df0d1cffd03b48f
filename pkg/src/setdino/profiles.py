"""Representation levels: single-cell, batch-level gene, consensus gene.

Learned profiles come from the teacher backbone (concatenated class tokens of
the last layers). The engineered baseline uses a small hand-written feature
extractor, NTC median/MAD normalization per batch and PCA.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import encoder, imageproc
from .errors import MissingControlsError, ShapeError, StorageError
from .synthgen import NTC_NAME

log = logging.getLogger(__name__)

LEVEL_KEYS = {
    "single_cell": ("cell_id",),
    "batch_guide": ("guide_id", "batch_id"),
    "batch_gene": ("gene", "batch_id"),
    "consensus_gene": ("gene",),
}
MAD_SCALE = 1.4826


@dataclass
class EmbeddingTable:
    features: np.ndarray  # [N, d]
    meta: pd.DataFrame  # one row per feature row, key columns included
    level: str
    provenance: str = "unknown"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.meta = self.meta.reset_index(drop=True)
        if self.level not in LEVEL_KEYS:
            raise ShapeError(f"unknown level {self.level!r}")
        if self.features.ndim != 2 or len(self.features) != len(self.meta):
            raise ShapeError(f"features {self.features.shape} do not match {len(self.meta)} rows")
        missing = [k for k in LEVEL_KEYS[self.level] if k not in self.meta.columns]
        if missing:
            raise ShapeError(f"level {self.level} needs key columns {missing}")
        if np.isnan(self.features).any():
            raise ShapeError("features contain NaN")

    @property
    def keys(self) -> list[tuple]:
        cols = LEVEL_KEYS[self.level]
        return [tuple(row) for row in self.meta[list(cols)].itertuples(index=False, name=None)]

    def sorted_by_key(self) -> "EmbeddingTable":
        """Rows in key order, so aggregates do not depend on input row order."""
        keys = self.keys
        return self.take(sorted(range(len(keys)), key=lambda i: keys[i]))

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.meta)

    def take(self, rows) -> "EmbeddingTable":
        rows = np.asarray(rows)
        return EmbeddingTable(self.features[rows], self.meta.iloc[rows], self.level,
                              self.provenance, dict(self.info))

    def with_features(self, features, **info) -> "EmbeddingTable":
        return EmbeddingTable(features, self.meta.copy(), self.level, self.provenance,
                              {**self.info, **info})


# ---- persistence -------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def save_table(table: EmbeddingTable, path) -> Path:
    """Write ``<path>.f32`` (raw little-endian row-major) and ``<path>.json``."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(table.features, dtype="<f4")
    try:
        feats.tofile(base.with_suffix(".f32"))
        sidecar = {
            "level": table.level,
            "provenance": table.provenance,
            "d": int(table.d),
            "rows": len(table),
            "key_columns": list(LEVEL_KEYS[table.level]),
            "columns": {c: [_jsonable(v) for v in table.meta[c].tolist()] for c in table.meta.columns},
            "column_order": list(table.meta.columns),
            "info": table.info,
        }
        base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))
    except OSError as exc:
        raise StorageError(f"cannot write table {base}: {exc}") from exc
    return base.with_suffix(".json")


def load_table(path) -> EmbeddingTable:
    base = Path(path)
    if base.suffix in (".json", ".f32"):
        base = base.with_suffix("")
    try:
        sidecar = json.loads(base.with_suffix(".json").read_text())
        feats = np.fromfile(base.with_suffix(".f32"), dtype="<f4")
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read table {base}: {exc}") from exc
    feats = feats.reshape(sidecar["rows"], sidecar["d"])
    meta = pd.DataFrame({c: sidecar["columns"][c] for c in sidecar["column_order"]})
    return EmbeddingTable(feats, meta, sidecar["level"], sidecar["provenance"], sidecar["info"])


# ---- single-cell profiles ---------------------------------------------------------

def cell_metadata(dataset) -> pd.DataFrame:
    return pd.DataFrame({
        "cell_id": [r.cell_id for r in dataset.records],
        "gene": [r.gene for r in dataset.records],
        "gene_id": [r.gene_id for r in dataset.records],
        "guide_id": [r.guide_id for r in dataset.records],
        "batch_id": [r.batch_id for r in dataset.records],
        "is_ntc": [bool(r.is_ntc) for r in dataset.records],
        "split": [r.split for r in dataset.records],
    })


def resize_batch(images, size: int):
    x = torch.as_tensor(images)
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def extract_single_cell_profiles(checkpoint, dataset, normalization: str = "ntc_zscore",
                                 batch_size: int = 512, images=None) -> EmbeddingTable:
    """One row per cell: teacher backbone class tokens of the last layers, concatenated.

    Whole cells are resized to the model's global crop size, the same view a
    full-area global crop gives during training.
    """
    if isinstance(checkpoint, (str, Path)):
        net, _ = encoder.load_network(checkpoint, "teacher")
        provenance = str(checkpoint)
    else:
        net, provenance = checkpoint, "in-memory"
    if images is None:
        images, _ = imageproc.preprocess_dataset(dataset, normalization)
    size = net.cfg.image_size
    dtype = next(net.parameters()).dtype
    chunks = []
    for start in range(0, len(images), batch_size):
        x = resize_batch(torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size])),
                         size).to(dtype)
        chunks.append(encoder.encode(net, x)[1].double().numpy())
    feats = np.concatenate(chunks) if chunks else np.zeros((0, net.cfg.feature_dim))
    return EmbeddingTable(feats, cell_metadata(dataset), "single_cell", provenance,
                          {"normalization": normalization})


ENGINEERED_FEATURE_NAMES = tuple(
    [f"{stat}_{ch}" for ch in ("dna", "dna_damage", "actin", "tubulin")
     for stat in ("mean", "std", "p10", "p90")]
    + [f"gradient_{ch}" for ch in ("dna", "dna_damage", "actin", "tubulin")]
    + ["dna_area", "dna_eccentricity"]
)


def _largest_component_shape(channel):
    peak = channel.max()
    if peak <= 0:
        return 0.0, 0.0
    labels, n = ndimage.label(channel > 0.5 * peak)
    if n == 0:
        return 0.0, 0.0
    sizes = np.bincount(labels.ravel())[1:]
    mask = labels == (np.argmax(sizes) + 1)
    area = float(mask.sum())
    ys, xs = np.nonzero(mask)
    if area < 2:
        return area, 0.0
    cov = np.cov(np.stack([ys, xs]).astype(np.float64), bias=True)
    lo, hi = np.linalg.eigvalsh(cov)
    ecc = float(np.sqrt(max(0.0, 1.0 - lo / hi))) if hi > 0 else 0.0
    return area, ecc


def engineered_features(cell) -> np.ndarray:
    """Fixed-order vector of ``len(ENGINEERED_FEATURE_NAMES)`` features.

    Per channel: mean, std, 10th/90th percentiles; per channel: mean gradient
    magnitude; on the DNA channel: area and eccentricity of the largest
    component above half the channel maximum.
    """
    img = np.asarray(getattr(cell, "image", cell), dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {img.shape}")
    flat = img.reshape(img.shape[0], -1)
    p10, p90 = np.percentile(flat, [10, 90], axis=1)
    stats = np.stack([flat.mean(1), flat.std(1), p10, p90], axis=1).ravel()
    gy, gx = np.gradient(img, axis=(1, 2))
    grad = np.sqrt(gx ** 2 + gy ** 2).reshape(img.shape[0], -1).mean(1)
    area, ecc = _largest_component_shape(img[0])
    return np.concatenate([stats, grad, [area, ecc]])


def engineered_table(dataset, lo_pct: float = 0.1, hi_pct: float = 99.9) -> EmbeddingTable:
    """Engineered features of every cell after per-batch clipping/rescaling."""
    feats = np.empty((len(dataset), len(ENGINEERED_FEATURE_NAMES)))
    batch_ids = np.array([r.batch_id for r in dataset.records])
    for b in sorted(set(batch_ids.tolist())):
        idx = np.flatnonzero(batch_ids == b)
        field_ = np.moveaxis(dataset.images[idx], 1, 0)
        clipped = np.moveaxis(imageproc.clip_and_rescale(field_, lo_pct, hi_pct), 0, 1)
        for j, i in enumerate(idx):
            feats[i] = engineered_features(clipped[j])
    return EmbeddingTable(feats, cell_metadata(dataset), "single_cell", "engineered",
                          {"feature_names": list(ENGINEERED_FEATURE_NAMES)})


# ---- normalization and PCA ----------------------------------------------------------

def robust_normalize(table: EmbeddingTable, min_ntc: int = 2) -> EmbeddingTable:
    """Per batch and feature: (x - median_NTC) / (1.4826 * MAD_NTC)."""
    out = table.features.copy()
    batches = table.meta["batch_id"].to_numpy()
    is_ntc = table.meta["is_ntc"].to_numpy(dtype=bool)
    flat_features = set()
    for b in sorted(set(batches.tolist())):
        rows = batches == b
        ntc = table.features[rows & is_ntc]
        if len(ntc) < min_ntc:
            raise MissingControlsError(f"batch {b} has {len(ntc)} NTC rows, need {min_ntc}")
        med = np.median(ntc, axis=0)
        mad = np.median(np.abs(ntc - med), axis=0)
        scale = MAD_SCALE * mad
        zero = scale <= 0
        flat_features.update(np.flatnonzero(zero).tolist())
        scale = np.where(zero, 1.0, scale)
        out[rows] = (table.features[rows] - med) / scale
    if flat_features:
        warnings.warn(f"zero NTC MAD for feature(s) {sorted(flat_features)}: centered only",
                      RuntimeWarning, stacklevel=2)
    return table.with_features(out, normalized="ntc_median_mad")


@dataclass
class PCATransform:
    mean: np.ndarray
    components: np.ndarray  # [k, d], rows orthonormal
    explained_variance: np.ndarray  # [k]
    explained_variance_ratio: np.ndarray  # [k]

    @property
    def n_components(self):
        return len(self.components)

    def transform(self, X, n_components=None):
        comps = self.components if n_components is None else self.components[:n_components]
        return (np.asarray(X, dtype=np.float64) - self.mean) @ comps.T

    def inverse_transform(self, Z):
        k = Z.shape[1]
        return Z @ self.components[:k] + self.mean

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("mean", "components", "explained_variance", "explained_variance_ratio")}


def fit_pca(X, variance_cutoff: float | None = None) -> PCATransform:
    """PCA by SVD of the centered data, truncated at numerical rank.

    With ``variance_cutoff`` keep the fewest leading components whose
    cumulative explained variance reaches it.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ShapeError("PCA needs at least 2 rows")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = max(X.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    s, vt = s[:rank], vt[:rank]
    var = s ** 2 / (X.shape[0] - 1)
    ratio = var / var.sum() if rank else var
    k = rank
    if variance_cutoff is not None and rank:
        cum = np.cumsum(ratio)
        k = int(np.searchsorted(cum, variance_cutoff - 1e-12) + 1)
        k = min(max(k, 1), rank)
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    return PCATransform(mean, vt[:k], var[:k], ratio[:k])


def pca_reduce(table: EmbeddingTable, variance_cutoff: float = 0.95):
    tf = fit_pca(table.features, variance_cutoff)
    return table.with_features(tf.transform(table.features), pca_components=tf.n_components), tf


# ---- aggregation levels -----------------------------------------------------------

def _group_mean(table, key_cols, meta_cols):
    table = table.sorted_by_key()
    meta = table.meta
    groups = meta.groupby(list(key_cols), sort=True).indices
    keys = sorted(groups)
    feats = np.empty((len(keys), table.d))
    rows = []
    for i, key in enumerate(keys):
        idx = np.sort(groups[key])
        feats[i] = table.features[idx].sum(axis=0) / len(idx)
        first = meta.iloc[idx[0]]
        key = key if isinstance(key, tuple) else (key,)
        row = dict(zip(key_cols, key))
        for c in meta_cols:
            if c in meta.columns and c not in row:
                row[c] = first[c]
        n_cells = meta["n_cells"].to_numpy()[idx].sum() if "n_cells" in meta.columns else len(idx)
        row["n_cells"] = int(n_cells)
        rows.append(row)
    return feats, pd.DataFrame(rows)


def batch_gene_profiles(table: EmbeddingTable) -> EmbeddingTable:
    """Mean profile per (gene, batch) over all guides; NTC grouped as one gene."""
    if table.level not in ("single_cell", "batch_gene"):
        raise ShapeError(f"expected single-cell rows, got level {table.level}")
    feats, meta = _group_mean(table, ("gene", "batch_id"), ("is_ntc", "split"))
    meta = meta.astype({"batch_id": int})
    return EmbeddingTable(feats, meta, "batch_gene", table.provenance, dict(table.info))


def batch_guide_profiles(table: EmbeddingTable) -> EmbeddingTable:
    if table.level not in ("single_cell", "batch_guide"):
        raise ShapeError(f"expected single-cell rows, got level {table.level}")
    feats, meta = _group_mean(table, ("guide_id", "batch_id"), ("gene", "is_ntc", "split"))
    return EmbeddingTable(feats, meta, "batch_guide", table.provenance, dict(table.info))


def consensus_profiles(table: EmbeddingTable) -> EmbeddingTable:
    """Center each batch on its NTC row, then average each gene across batches."""
    if table.level != "batch_gene":
        raise ShapeError(f"expected batch_gene rows, got level {table.level}")
    table = table.sorted_by_key()
    meta = table.meta
    is_ntc = meta["is_ntc"].to_numpy(dtype=bool)
    batches = meta["batch_id"].to_numpy()
    centered = table.features.copy()
    for b in sorted(set(batches.tolist())):
        ntc_rows = np.flatnonzero((batches == b) & is_ntc)
        if len(ntc_rows) == 0:
            raise MissingControlsError(f"batch {b} has no NTC profile row")
        ntc_mean = table.features[ntc_rows].mean(axis=0)
        rows = batches == b
        centered[rows] = table.features[rows] - ntc_mean
    genes = sorted(set(meta.loc[~is_ntc, "gene"].tolist()))
    feats = np.empty((len(genes), table.d))
    n_batches = []
    gene_col = meta["gene"].to_numpy()
    for i, g in enumerate(genes):
        rows = np.flatnonzero((gene_col == g) & ~is_ntc)
        feats[i] = centered[rows].mean(axis=0)
        n_batches.append(len(rows))
    out_meta = pd.DataFrame({"gene": genes, "is_ntc": False, "n_batches": n_batches})
    return EmbeddingTable(feats, out_meta, "consensus_gene", table.provenance, dict(table.info))


def build_levels(single: EmbeddingTable, engineered: bool | None = None,
                 variance_cutoff: float = 0.95) -> dict:
    """All representation levels from a single-cell table.

    Engineered features (the default when ``single.provenance`` is
    "engineered") get NTC median/MAD normalization and PCA first; learned
    features are aggregated as they are.
    """
    if engineered is None:
        engineered = single.provenance == "engineered"
    if engineered:
        single = robust_normalize(single)
        single, _ = pca_reduce(single, variance_cutoff)
    batch_gene = batch_gene_profiles(single)
    return {
        "single_cell": single,
        "batch_guide": batch_guide_profiles(single),
        "batch_gene": batch_gene,
        "consensus_gene": consensus_profiles(batch_gene),
    }


def ntc_label() -> str:
    return NTC_NAME
