"""Intensity preprocessing, the two normalization schemes, and multi-crop."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import MissingControlsError, MisuseError, ShapeError

NORMALIZATIONS = ("zscore", "ntc_zscore")


class MissingVarianceError(MissingControlsError):
    pass


@dataclass
class NtcStats:
    batch_id: int
    mean: list
    std: list
    n_cells: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NtcStats":
        return cls(**json.loads(text))


def _channels(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim < 2 or arr.size == 0 or arr.shape[0] == 0:
        raise ShapeError(f"expected a non-empty [C, ...] image, got shape {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def clip_and_rescale(image, lo_pct: float = 0.1, hi_pct: float = 99.9) -> np.ndarray:
    """Clip each channel to its [lo_pct, hi_pct] percentiles and map to [0, 1].

    ``image`` is ``[C, ...]``; any trailing layout works, so a stack of cells
    from one field can be passed as ``[C, N, H, W]`` to share percentiles.
    Constant channels map to zeros.
    """
    if not lo_pct < hi_pct:
        raise ValueError("lo_pct must be < hi_pct")
    arr = np.asarray(image)
    flat = _channels(arr).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise ValueError("image contains non-finite values")
    lo, hi = np.percentile(flat, [lo_pct, hi_pct], axis=1)
    out = np.zeros_like(flat)
    for c in range(flat.shape[0]):
        span = hi[c] - lo[c]
        if span > 0:
            out[c] = (np.clip(flat[c], lo[c], hi[c]) - lo[c]) / span
    return out.reshape(arr.shape).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def zscore_normalize(image) -> np.ndarray:
    """Per-image, per-channel z-score (population std).

    A zero-variance channel becomes all zeros and emits a RuntimeWarning.
    """
    arr = np.asarray(image)
    flat = _channels(arr).astype(np.float64)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    flat_std = std[:, 0] <= 1e-12 * np.maximum(1.0, np.abs(mean[:, 0]))
    if flat_std.any():
        warnings.warn(f"zero-variance channel(s) {np.flatnonzero(flat_std).tolist()} set to 0",
                      RuntimeWarning, stacklevel=2)
    std = np.where(flat_std[:, None], 1.0, std)
    out = np.where(flat_std[:, None], 0.0, (flat - mean) / std)
    return out.reshape(arr.shape).astype(np.float32 if arr.dtype == np.float32 else np.float64)


def compute_ntc_stats(records, batch_id: int) -> NtcStats:
    """Pooled per-channel pixel mean/std over all NTC cells of one batch.

    ``records`` is an iterable of CellRecord (or a Dataset) whose images are
    already clipped and rescaled.
    """
    recs = getattr(records, "records", records)
    imgs = [r.image for r in recs if r.batch_id == batch_id and r.is_ntc]
    if not imgs:
        raise MissingControlsError(f"batch {batch_id} has no NTC cells")
    stack = np.stack(imgs).astype(np.float64)  # [N, C, H, W]
    pix = np.moveaxis(stack, 1, 0).reshape(stack.shape[1], -1)
    mean = pix.mean(axis=1)
    std = pix.std(axis=1)
    if np.any(std <= 0):
        raise MissingVarianceError(
            f"batch {batch_id}: NTC pixels have zero variance in channel(s) "
            f"{np.flatnonzero(std <= 0).tolist()}")
    return NtcStats(int(batch_id), mean.tolist(), std.tolist(), len(imgs))


def ntc_zscore_normalize(image, stats: NtcStats, batch_id: int) -> np.ndarray:
    if int(batch_id) != int(stats.batch_id):
        raise MisuseError(f"stats are for batch {stats.batch_id}, image is from batch {batch_id}")
    arr = np.asarray(image)
    mean = np.asarray(stats.mean).reshape(-1, *([1] * (arr.ndim - 1)))
    std = np.asarray(stats.std).reshape(-1, *([1] * (arr.ndim - 1)))
    if np.any(std <= 0):
        raise MissingVarianceError(f"batch {stats.batch_id}: non-positive NTC std")
    out = (arr - mean) / std
    return out.astype(np.float32 if arr.dtype == np.float32 else np.float64)


def preprocess_dataset(dataset, normalization: str = "ntc_zscore", lo_pct: float = 0.1,
                       hi_pct: float = 99.9):
    """Clip/rescale each batch as one field, then normalize every cell.

    Returns ``(images [N, C, H, W] float32, {batch_id: NtcStats})``; the stats
    dict is empty for ``zscore``.
    """
    if normalization not in NORMALIZATIONS:
        raise MisuseError(f"unknown normalization {normalization!r}")
    recs = dataset.records
    out = np.empty_like(dataset.images, dtype=np.float32)
    batch_ids = np.array([r.batch_id for r in recs])
    all_stats = {}
    for b in sorted(set(batch_ids.tolist())):
        idx = np.flatnonzero(batch_ids == b)
        field = np.moveaxis(dataset.images[idx], 1, 0)  # [C, N, H, W]
        clipped = np.moveaxis(clip_and_rescale(field, lo_pct, hi_pct), 0, 1).astype(np.float32)
        if normalization == "zscore":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                for j, i in enumerate(idx):
                    out[i] = zscore_normalize(clipped[j])
        else:
            ntc = [_View(b, recs[i].is_ntc, clipped[j]) for j, i in enumerate(idx)]
            stats = compute_ntc_stats(ntc, b)
            all_stats[b] = stats
            normed = ntc_zscore_normalize(np.moveaxis(clipped, 1, 0), stats, b)
            out[idx] = np.moveaxis(normed, 0, 1)
    return out, all_stats


@dataclass
class _View:
    batch_id: int
    is_ntc: bool
    image: np.ndarray


# ---- multi-crop -------------------------------------------------------------

_DIHEDRAL = [np.array(m, dtype=np.float64) for m in (
    [[1, 0], [0, 1]], [[0, -1], [1, 0]], [[-1, 0], [0, -1]], [[0, 1], [-1, 0]],
    [[-1, 0], [0, 1]], [[0, -1], [-1, 0]], [[1, 0], [0, -1]], [[0, 1], [1, 0]],
)]


def _crop_thetas(rng, count, scale):
    thetas = np.zeros((count, 2, 3))
    for i in range(count):
        area, ux, uy, u_sym = rng.uniform(scale[0], scale[1]), rng.random(), rng.random(), rng.random()
        side = np.sqrt(area)
        # crop centre in [-1, 1] coordinates, keeping the square inside the image
        cx = (2 * ux - 1) * (1 - side)
        cy = (2 * uy - 1) * (1 - side)
        sym = _DIHEDRAL[min(int(u_sym * 8), 7)]
        thetas[i, :, :2] = side * sym
        thetas[i, :, 2] = (cx, cy)
    return thetas


def _sample(image, thetas, size):
    n = thetas.shape[0]
    c = image.shape[0]
    if n == 0:
        return image.new_zeros((0, c, size, size))
    theta = torch.as_tensor(thetas, dtype=image.dtype)
    grid = F.affine_grid(theta, [n, c, size, size], align_corners=False)
    src = image.unsqueeze(0).expand(n, -1, -1, -1)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def multicrop(image, n_global: int = 2, n_local: int = 8, rng=None, global_size: int = 48,
              local_size: int = 24, global_scale=(0.5, 1.0), local_scale=(0.15, 0.4)):
    """Random square crops with a random flip/90-degree rotation each.

    Global crops cover ``global_scale`` of the image area, local crops
    ``local_scale``; both are resampled bilinearly to their output sizes.
    Returns ``(global [n_global, C, g, g], local [n_local, C, l, l])`` tensors.
    """
    if rng is None:
        rng = np.random.default_rng()
    img = torch.as_tensor(np.asarray(image)) if not torch.is_tensor(image) else image
    if img.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {tuple(img.shape)}")
    if max(global_size, local_size) > min(img.shape[-2:]):
        raise ShapeError("crop sizes must not exceed the image size")
    g = _sample(img, _crop_thetas(rng, n_global, global_scale), global_size)
    loc = _sample(img, _crop_thetas(rng, n_local, local_scale), local_size)
    return g, loc
