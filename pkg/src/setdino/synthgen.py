"""Miniature synthetic optical pooled screen with known ground truth.

A world fixes the planted biology (per-gene effects on a handful of render
parameters, gene modules, guide efficacies) and the planted technical
confounders (per-batch channel gain, offset and blur). Cells are rendered
procedurally from a parameter vector; nothing here tries to look like real
microscopy, it only has to make morphology parameters recoverable from pixels.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, special, stats

from . import storage
from .errors import ConfigError, LookupFailure, StorageError

log = logging.getLogger(__name__)

NTC = -1
NTC_NAME = "NTC"
CHANNELS = ("dna", "dna_damage", "actin", "tubulin")

# name, baseline value, scale of one effect unit
RENDER_PARAMS = (
    ("nucleus_radius", 0.15, 0.022),  # fraction of image side
    ("dna_intensity", 1.0, 0.18),
    ("damage_foci", 3.0, 1.5),
    ("actin_intensity", 0.7, 0.12),
    ("tubulin_intensity", 0.7, 0.12),
    ("cell_radius", 0.33, 0.035),  # fraction of image side
    ("filament_count", 6.0, 2.0),
    ("filament_coherence", 0.5, 0.15),
    ("eccentricity", 0.35, 0.12),
)
PARAM_NAMES = tuple(p[0] for p in RENDER_PARAMS)
N_PARAMS = len(RENDER_PARAMS)
_BASE = np.array([p[1] for p in RENDER_PARAMS])
_SCALE = np.array([p[2] for p in RENDER_PARAMS])

MAX_FOCI = 16
MAX_FILAMENTS = 16


@dataclass
class WorldConfig:
    n_genes: int = 64
    guides_per_gene: int = 4
    n_ntc_guides: int = 8
    n_batches: int = 6
    n_modules: int = 8
    module_size: int = 5
    module_similarity_floor: float = 0.8
    effect_support: tuple = (2, 4)
    # log-uniform range of the L2 norm of a gene's effect, in effect units
    effect_magnitude: tuple = (0.3, 3.0)
    guide_efficacy_beta: tuple = (5.0, 1.5)
    escaper_rate: float = 0.1
    gain_range: tuple = (0.7, 1.6)
    offset_range: tuple = (0.0, 0.05)
    blur_range: tuple = (0.0, 1.5)
    cell_noise: float = 0.6
    pixel_noise: float = 0.02
    image_size: int = 64
    flat_field: float = 0.0
    train_batches: int | None = None
    val_batches: int | None = None
    test_batches: int | None = None

    def validate(self) -> None:
        for name in ("n_genes", "guides_per_gene", "n_ntc_guides", "n_batches"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.n_modules < 0 or self.module_size < 0:
            raise ConfigError("n_modules", "module counts must be >= 0")
        if self.n_modules and self.module_size < 2:
            raise ConfigError("module_size", "modules need at least 2 genes")
        if self.n_modules * self.module_size > self.n_genes:
            raise ConfigError("n_modules", "modules need more genes than n_genes")
        if not 0.0 <= self.escaper_rate <= 1.0:
            raise ConfigError("escaper_rate", "must lie in [0, 1]")
        if not -1.0 <= self.module_similarity_floor < 1.0:
            raise ConfigError("module_similarity_floor", "must lie in [-1, 1)")
        lo, hi = self.effect_support
        if not 1 <= lo <= hi <= N_PARAMS:
            raise ConfigError("effect_support", f"need 1 <= lo <= hi <= {N_PARAMS}")
        lo, hi = self.effect_magnitude
        if not 0 < lo <= hi:
            raise ConfigError("effect_magnitude", "need 0 < lo <= hi")
        if self.gain_range[0] <= 0 or self.gain_range[0] > self.gain_range[1]:
            raise ConfigError("gain_range", "gains must be positive and ordered")
        if self.offset_range[0] < 0 or self.offset_range[0] > self.offset_range[1]:
            raise ConfigError("offset_range", "offsets must be non-negative and ordered")
        if self.blur_range[0] < 0 or self.blur_range[0] > self.blur_range[1]:
            raise ConfigError("blur_range", "blur sigmas must be non-negative and ordered")
        if self.cell_noise < 0 or self.pixel_noise < 0:
            raise ConfigError("cell_noise", "noise levels must be >= 0")
        if self.image_size < 16 or self.image_size % 2:
            raise ConfigError("image_size", "must be an even integer >= 16")
        self.split_counts()

    def split_counts(self) -> tuple[int, int, int]:
        given = (self.train_batches, self.val_batches, self.test_batches)
        if all(v is None for v in given):
            b = self.n_batches
            if b >= 3:
                return b - 2, 1, 1
            return b, 0, 0
        counts = tuple(int(v or 0) for v in given)
        if any(c < 0 for c in counts) or counts[0] < 1:
            raise ConfigError("train_batches", "need >= 1 training batch")
        if sum(counts) != self.n_batches:
            raise ConfigError("train_batches", "split counts must sum to n_batches")
        return counts


@dataclass
class WorldSpec:
    """Ground truth of one synthetic screen."""

    config: WorldConfig
    rng_seed: int
    gene_names: list
    gene_effects: np.ndarray  # [n_genes, N_PARAMS]
    module_assignment: np.ndarray  # [n_genes], -1 = no module
    guide_gene: np.ndarray  # [n_guides], NTC for controls
    guide_efficacy: np.ndarray  # [n_guides]
    batch_gain: np.ndarray  # [n_batches, 4]
    batch_offset: np.ndarray  # [n_batches, 4]
    batch_blur: np.ndarray  # [n_batches]

    @property
    def n_genes(self):
        return len(self.gene_names)

    @property
    def n_guides(self):
        return len(self.guide_gene)

    @property
    def n_batches(self):
        return len(self.batch_blur)

    @property
    def escaper_rate(self):
        return self.config.escaper_rate

    def gene_name(self, gene_id: int) -> str:
        return NTC_NAME if gene_id == NTC else self.gene_names[gene_id]

    def truth_edges(self) -> list[tuple[str, str]]:
        """All within-module gene pairs, as sorted name tuples."""
        edges = []
        for m in sorted(set(self.module_assignment.tolist()) - {-1}):
            members = np.flatnonzero(self.module_assignment == m)
            for a, b in itertools.combinations(members.tolist(), 2):
                edges.append(tuple(sorted((self.gene_names[a], self.gene_names[b]))))
        return sorted(edges)

    def curated_truth_edges(self) -> list[tuple[str, str]]:
        """Module edges restricted to modules with above-median effect strength.

        Stand-in for a curated relationship database: a subset of the truth
        whose members actually carry visible signal.
        """
        mods = sorted(set(self.module_assignment.tolist()) - {-1})
        if not mods:
            return []
        norms = np.linalg.norm(self.gene_effects, axis=1)
        strength = {m: norms[self.module_assignment == m].mean() for m in mods}
        cut = np.median(list(strength.values()))
        keep = {m for m in mods if strength[m] >= cut}
        names = self.gene_names
        return [e for e in self.truth_edges()
                if self.module_assignment[names.index(e[0])] in keep]

    def to_json(self) -> dict:
        cfg = dataclasses.asdict(self.config)
        return {
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
            "rng_seed": int(self.rng_seed),
            "gene_names": list(self.gene_names),
            "gene_effects": self.gene_effects.tolist(),
            "module_assignment": self.module_assignment.tolist(),
            "guide_gene": self.guide_gene.tolist(),
            "guide_efficacy": self.guide_efficacy.tolist(),
            "batch_gain": self.batch_gain.tolist(),
            "batch_offset": self.batch_offset.tolist(),
            "batch_blur": self.batch_blur.tolist(),
            "param_names": list(PARAM_NAMES),
        }

    @classmethod
    def from_json(cls, data: dict) -> "WorldSpec":
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in data["config"].items()}
        return cls(
            config=WorldConfig(**cfg),
            rng_seed=data["rng_seed"],
            gene_names=list(data["gene_names"]),
            gene_effects=np.asarray(data["gene_effects"], dtype=np.float64),
            module_assignment=np.asarray(data["module_assignment"], dtype=np.int64),
            guide_gene=np.asarray(data["guide_gene"], dtype=np.int64),
            guide_efficacy=np.asarray(data["guide_efficacy"], dtype=np.float64),
            batch_gain=np.asarray(data["batch_gain"], dtype=np.float64),
            batch_offset=np.asarray(data["batch_offset"], dtype=np.float64),
            batch_blur=np.asarray(data["batch_blur"], dtype=np.float64),
        )


@dataclass
class CellRecord:
    cell_id: int
    gene_id: int
    guide_id: int
    batch_id: int
    escaper: bool
    image: np.ndarray | None  # [4, H, W] float32
    well_position: tuple
    cell_seed: int = 0
    gene: str = ""
    split: str = "train"

    @property
    def is_ntc(self):
        return self.gene_id == NTC

    def meta(self) -> dict:
        return {
            "cell_id": self.cell_id, "gene_id": self.gene_id, "gene": self.gene,
            "guide_id": self.guide_id, "batch_id": self.batch_id,
            "escaper": bool(self.escaper), "well_position": list(self.well_position),
            "cell_seed": self.cell_seed, "split": self.split,
        }


def _sparse_direction(rng, n_support, support=None):
    if support is None:
        support = rng.choice(N_PARAMS, size=n_support, replace=False)
    v = np.zeros(N_PARAMS)
    v[support] = rng.normal(size=len(support))
    while np.linalg.norm(v) < 1e-6:
        v[support] = rng.normal(size=len(support))
    return v / np.linalg.norm(v), np.sort(support)


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> WorldSpec:
    config = config or WorldConfig()
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    G = config.n_genes
    lo_s, hi_s = config.effect_support
    lo_m, hi_m = config.effect_magnitude

    magnitudes = np.exp(rng.uniform(np.log(lo_m), np.log(hi_m), size=G))
    module_assignment = np.full(G, -1, dtype=np.int64)
    order = rng.permutation(G)
    for m in range(config.n_modules):
        module_assignment[order[m * config.module_size:(m + 1) * config.module_size]] = m

    directions = np.zeros((G, N_PARAMS))
    floor = config.module_similarity_floor
    for m in range(config.n_modules):
        members = np.flatnonzero(module_assignment == m)
        proto, support = _sparse_direction(rng, int(rng.integers(lo_s, hi_s + 1)))
        for g in members:
            # pairwise angle <= twice the angle to the prototype, so bound that
            jitter = 0.35
            while True:
                d = proto.copy()
                d[support] += rng.normal(scale=jitter, size=len(support))
                if np.linalg.norm(d) > 1e-6 and _cosine(d, proto) >= np.sqrt((1 + floor) / 2):
                    break
                jitter *= 0.5
            directions[g] = d / np.linalg.norm(d)
    for g in np.flatnonzero(module_assignment == -1):
        directions[g], _ = _sparse_direction(rng, int(rng.integers(lo_s, hi_s + 1)))
    gene_effects = directions * magnitudes[:, None]

    gpg = config.guides_per_gene
    guide_gene = np.concatenate([np.repeat(np.arange(G), gpg),
                                 np.full(config.n_ntc_guides, NTC)]).astype(np.int64)
    a, b = config.guide_efficacy_beta
    efficacy = np.concatenate([rng.beta(a, b, size=G * gpg), np.zeros(config.n_ntc_guides)])

    B = config.n_batches
    gain = rng.uniform(*config.gain_range, size=(B, len(CHANNELS)))
    offset = rng.uniform(*config.offset_range, size=(B, len(CHANNELS)))
    blur = rng.uniform(*config.blur_range, size=B)

    return WorldSpec(
        config=dataclasses.replace(config),
        rng_seed=int(seed),
        gene_names=[f"G{g:03d}" for g in range(G)],
        gene_effects=gene_effects,
        module_assignment=module_assignment,
        guide_gene=guide_gene,
        guide_efficacy=efficacy,
        batch_gain=gain,
        batch_offset=offset,
        batch_blur=blur,
    )


def with_confounders(world: WorldSpec, gain=None, offset=None, blur=None) -> WorldSpec:
    """Copy of ``world`` with some batch confounders replaced (broadcast per batch)."""
    B = world.n_batches
    new = dataclasses.replace(world)
    if gain is not None:
        new.batch_gain = np.broadcast_to(np.asarray(gain, float).reshape(-1, 1)
                                         if np.ndim(gain) == 1 else np.asarray(gain, float),
                                         (B, len(CHANNELS))).copy()
    if offset is not None:
        new.batch_offset = np.broadcast_to(np.asarray(offset, float).reshape(-1, 1)
                                           if np.ndim(offset) == 1 else np.asarray(offset, float),
                                           (B, len(CHANNELS))).copy()
    if blur is not None:
        new.batch_blur = np.broadcast_to(np.asarray(blur, float), (B,)).copy()
    return new


def _soft_ellipse(u, v, radius, ecc, softness=0.7):
    # area-preserving axes: a*b == radius**2
    k = (1.0 - ecc ** 2) ** 0.25
    a, b = radius / k, radius * k
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return special.expit((1.0 - rho) * radius / softness)


def render_parameters(world: WorldSpec, gene: int, guide: int, cell_seed: int):
    """Return ``(params, escaper, rng)`` for one cell; rng continues the cell stream."""
    rng = np.random.default_rng(int(cell_seed))
    escaper_coin = rng.random()
    noise = rng.normal(scale=world.config.cell_noise, size=N_PARAMS)
    if gene == NTC:
        escaper = False
        effect = np.zeros(N_PARAMS)
    else:
        escaper = bool(escaper_coin < world.escaper_rate)
        effect = world.gene_effects[gene] * world.guide_efficacy[guide]
        if escaper:
            effect = np.zeros(N_PARAMS)
    params = _BASE + _SCALE * (effect + noise)
    return params, escaper, rng


def _draw(params, rng, size, pixel_noise):
    S = size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    # fixed-size draws so the stream never depends on parameter values
    jitter = rng.normal(scale=0.03 * S, size=2)
    theta = rng.uniform(0, np.pi)
    cell_shift = rng.normal(scale=0.02 * S, size=2)
    foci_u = rng.random(MAX_FOCI)
    foci_r = np.sqrt(rng.random(MAX_FOCI)) * 0.8
    foci_a = rng.uniform(0, 2 * np.pi, MAX_FOCI)
    fil_dir = rng.uniform(0, np.pi)
    fil_spread = rng.uniform(-np.pi / 2, np.pi / 2, MAX_FILAMENTS)
    fil_freq = rng.uniform(0.12, 0.2, MAX_FILAMENTS)
    fil_phase = rng.uniform(0, 2 * np.pi, MAX_FILAMENTS)
    dna_phase = rng.uniform(0, 2 * np.pi, 3)
    dna_dir = rng.uniform(0, np.pi, 3)
    spoke_phase = rng.uniform(0, 2 * np.pi)
    pix = rng.normal(scale=pixel_noise, size=(4, S, S))

    r_nuc = max(params[0], 0.04) * S
    dna_int = max(params[1], 0.0)
    foci_mean = max(params[2], 0.0)
    actin_int = max(params[3], 0.0)
    tub_int = max(params[4], 0.0)
    r_cell = max(params[5] * S, r_nuc * 1.2)
    n_fil = int(np.clip(np.rint(params[6]), 1, MAX_FILAMENTS))
    coherence = float(np.clip(params[7], 0.0, 1.0))
    ecc = float(np.clip(params[8], 0.0, 0.9))

    cy, cx = S / 2 + jitter
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    nuc = _soft_ellipse(u, v, r_nuc, ecc)
    cu = u - cell_shift[0]
    cv = v - cell_shift[1]
    cell = _soft_ellipse(cu, cv, r_cell, 0.5 * ecc, softness=1.0)

    img = np.zeros((4, S, S))
    tex = np.zeros((S, S))
    for i in range(3):
        tex += np.cos(2 * np.pi * 0.05 * (np.cos(dna_dir[i]) * xx + np.sin(dna_dir[i]) * yy) + dna_phase[i])
    img[0] = dna_int * nuc * (0.85 + 0.05 * tex)

    n_foci = int(min(stats.poisson.ppf(foci_u[0], foci_mean), MAX_FOCI)) if foci_mean > 0 else 0
    k = (1.0 - ecc ** 2) ** 0.25
    damage = 0.08 * nuc
    for i in range(n_foci):
        fu = foci_r[i] * np.cos(foci_a[i]) * r_nuc / k
        fv = foci_r[i] * np.sin(foci_a[i]) * r_nuc * k
        fx = cx + c * fu - s * fv
        fy = cy + s * fu + c * fv
        damage = damage + 0.8 * np.exp(-((xx - fx) ** 2 + (yy - fy) ** 2) / (2 * 0.9 ** 2))
    img[1] = damage

    angles = fil_dir + (1.0 - coherence) * fil_spread[:n_fil]
    fil = np.zeros((S, S))
    for i in range(n_fil):
        proj = np.cos(angles[i]) * xx + np.sin(angles[i]) * yy
        fil += (0.5 + 0.5 * np.cos(2 * np.pi * fil_freq[i] * proj + fil_phase[i])) ** 6
    fil /= n_fil
    img[2] = actin_int * cell * (0.3 + 0.7 * fil)

    spokes = (0.5 + 0.5 * np.cos(8 * np.arctan2(cv, cu) + spoke_phase)) ** 2
    img[3] = tub_int * cell * (1.0 - 0.7 * nuc) * (0.4 + 0.6 * spokes)

    img = np.clip(img + 0.02 + pix, 0.0, None)
    return img


def _apply_confounders(img, world, batch, well_position):
    if world.config.flat_field:
        plane = 1.0 + world.config.flat_field * (well_position[1] - 0.5)
        img = img * plane
    img = world.batch_gain[batch][:, None, None] * img + world.batch_offset[batch][:, None, None]
    sigma = float(world.batch_blur[batch])
    if sigma > 0:
        img = np.stack([ndimage.gaussian_filter(ch, sigma, mode="reflect") for ch in img])
    return img


def _check_ids(world, gene, guide, batch):
    if not 0 <= guide < world.n_guides:
        raise LookupFailure(f"unknown guide {guide}")
    if not 0 <= batch < world.n_batches:
        raise LookupFailure(f"unknown batch {batch}")
    if gene != NTC and not 0 <= gene < world.n_genes:
        raise LookupFailure(f"unknown gene {gene}")
    if world.guide_gene[guide] != gene:
        raise LookupFailure(f"guide {guide} does not target gene {gene}")


def render_cell(world: WorldSpec, gene: int, guide: int, batch: int, cell_seed: int,
                cell_id: int = 0) -> CellRecord:
    """Render one cell: planted effect, then per-batch gain/offset and blur."""
    _check_ids(world, gene, guide, batch)
    params, escaper, rng = render_parameters(world, gene, guide, cell_seed)
    well_position = tuple(float(x) for x in rng.random(2))
    img = _draw(params, rng, world.config.image_size, world.config.pixel_noise)
    img = _apply_confounders(img, world, batch, well_position)
    return CellRecord(
        cell_id=cell_id, gene_id=int(gene), guide_id=int(guide), batch_id=int(batch),
        escaper=escaper, image=img.astype(np.float32), well_position=well_position,
        cell_seed=int(cell_seed), gene=world.gene_name(gene),
    )


def cell_seed_for(seed: int, batch: int, guide: int, index: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(batch), int(guide), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Dataset:
    """A rendered screen: world, cell records, and the stacked image array."""

    world: WorldSpec
    records: list
    images: np.ndarray  # [N, 4, H, W] float32
    seed: int = 0
    cells_per_guide_per_batch: int = 0
    split_of_batch: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def batches(self):
        return sorted({r.batch_id for r in self.records})

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        recs = []
        for new_i, i in enumerate(idx.tolist()):
            r = dataclasses.replace(self.records[i])
            recs.append(r)
        imgs = self.images[idx]
        for r, im in zip(recs, imgs):
            r.image = im
        return Dataset(self.world, recs, imgs, self.seed, self.cells_per_guide_per_batch,
                       dict(self.split_of_batch))

    def split(self, name: str) -> "Dataset":
        return self.subset([i for i, r in enumerate(self.records) if r.split == name])

    def frame(self):
        import pandas as pd
        return pd.DataFrame([{k: v for k, v in r.meta().items() if k != "well_position"}
                             for r in self.records])


def split_assignment(world: WorldSpec) -> dict:
    n_train, n_val, n_test = world.config.split_counts()
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return {b: names[b] for b in range(world.n_batches)}


def generate_dataset(world: WorldSpec, cells_per_guide_per_batch: int = 16,
                     seed: int = 0) -> Dataset:
    if int(cells_per_guide_per_batch) < 1:
        raise ConfigError("cells_per_guide_per_batch", "must be >= 1")
    splits = split_assignment(world)
    n = int(cells_per_guide_per_batch)
    S = world.config.image_size
    total = world.n_batches * world.n_guides * n
    images = np.empty((total, 4, S, S), dtype=np.float32)
    records = []
    cid = 0
    for batch in range(world.n_batches):
        for guide in range(world.n_guides):
            gene = int(world.guide_gene[guide])
            for i in range(n):
                rec = render_cell(world, gene, guide, batch, cell_seed_for(seed, batch, guide, i),
                                  cell_id=cid)
                images[cid] = rec.image
                rec.image = images[cid]
                rec.split = splits[batch]
                records.append(rec)
                cid += 1
    return Dataset(world, records, images, int(seed), n, splits)


# ---- files -----------------------------------------------------------------

def write_edges_csv(path, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_a", "gene_b"])
        for a, b in edges:
            w.writerow([a, b])


def read_edges_csv(path) -> list[tuple[str, str]]:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if rows and [x.strip().lower() for x in rows[0]] == ["gene_a", "gene_b"]:
        rows = rows[1:]
    edges = []
    for r in rows:
        if len(r) < 2:
            raise StorageError(f"{path}: expected two columns, got {r!r}")
        edges.append((r[0].strip(), r[1].strip()))
    return edges


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write manifest.jsonl, per-batch image stacks, world.json and truth CSVs."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc
    lines = []
    for batch in ds.batches():
        idx = [i for i, r in enumerate(ds.records) if r.batch_id == batch]
        rel = f"images/batch_{batch:03d}.f32"
        storage.write_array(out / rel, ds.images[idx], batch_id=batch)
        for row, i in enumerate(idx):
            meta = ds.records[i].meta()
            meta.update(path=rel, index=row)
            lines.append(json.dumps(meta, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    (out / "world.json").write_text(json.dumps(ds.world.to_json(), sort_keys=True, indent=1))
    (out / "dataset.json").write_text(json.dumps({
        "seed": ds.seed,
        "cells_per_guide_per_batch": ds.cells_per_guide_per_batch,
        "n_cells": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "split_of_batch": {str(k): v for k, v in sorted(ds.split_of_batch.items())},
    }, sort_keys=True, indent=1))
    write_edges_csv(out / "truth_edges.csv", ds.world.truth_edges())
    write_edges_csv(out / "truth_edges_curated.csv", ds.world.curated_truth_edges())
    return manifest


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        world = WorldSpec.from_json(json.loads((d / "world.json").read_text()))
        info = json.loads((d / "dataset.json").read_text())
        metas = [json.loads(line) for line in (d / "manifest.jsonl").read_text().splitlines() if line]
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot load dataset from {d}: {exc}") from exc
    stacks = {}
    images = np.empty((len(metas), *info["image_shape"]), dtype=np.float32)
    records = []
    for i, m in enumerate(metas):
        if m["path"] not in stacks:
            stacks[m["path"]] = storage.read_array(d / m["path"])[0]
        images[i] = stacks[m["path"]][m["index"]]
        records.append(CellRecord(
            cell_id=m["cell_id"], gene_id=m["gene_id"], guide_id=m["guide_id"],
            batch_id=m["batch_id"], escaper=m["escaper"], image=images[i],
            well_position=tuple(m["well_position"]), cell_seed=m["cell_seed"],
            gene=m["gene"], split=m["split"]))
    splits = {int(k): v for k, v in info["split_of_batch"].items()}
    return Dataset(world, records, images, info["seed"], info["cells_per_guide_per_batch"], splits)
