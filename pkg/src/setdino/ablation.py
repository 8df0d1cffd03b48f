"""Sampling-strategy ablation: train and evaluate a grid of arms on one dataset."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import imageproc, metrics, profiles, sampler, synthgen, trainer
from .errors import ConfigError

log = logging.getLogger(__name__)

RESULT_FIELDS = ("arm", "label", "strategy", "n", "N_P", "normalization", "level", "seed",
                 "status", "batch_knn", "graph_connectivity", "reproducibility_knn", "map",
                 "recall_5", "recall_10", "collapse_final", "collapse_flag", "steps", "error")


@dataclass(frozen=True)
class Arm:
    strategy: str
    n: int
    normalization: str = "ntc_zscore"
    level: str = "sgRNA"

    @property
    def name(self) -> str:
        return f"{self.strategy}_n{self.n}_{self.normalization}_{self.level}"

    @property
    def label(self) -> str:
        if self.strategy == "same_cells" and self.n == 1:
            return "standard DINO baseline"
        return f"{self.strategy.replace('_', '-')} n={self.n}"


def parse_arm(spec, defaults: trainer.TrainConfig | None = None) -> Arm:
    """``"strategy:n[:normalization[:level]]"`` or a dict with those keys."""
    d = defaults or trainer.TrainConfig()
    if isinstance(spec, dict):
        fields = dict(spec)
    else:
        parts = str(spec).split(":")
        if len(parts) < 2 or len(parts) > 4:
            raise ConfigError("ablate.arms", f"bad arm {spec!r}; use strategy:n[:norm[:level]]")
        fields = dict(zip(("strategy", "n", "normalization", "level"), parts))
    try:
        arm = Arm(fields["strategy"], int(fields["n"]),
                  fields.get("normalization", d.normalization), fields.get("level", d.level))
    except (KeyError, ValueError) as exc:
        raise ConfigError("ablate.arms", f"bad arm {spec!r}") from exc
    if arm.strategy not in sampler.STRATEGIES:
        raise ConfigError("ablate.arms", f"unknown strategy {arm.strategy!r}")
    if arm.normalization not in imageproc.NORMALIZATIONS:
        raise ConfigError("ablate.arms", f"unknown normalization {arm.normalization!r}")
    if arm.level not in sampler.LEVELS:
        raise ConfigError("ablate.arms", f"unknown level {arm.level!r}")
    return arm


def arm_config(base: trainer.TrainConfig, arm: Arm, seed: int) -> trainer.TrainConfig:
    cfg = dataclasses.replace(base, strategy=arm.strategy, n=arm.n,
                              normalization=arm.normalization, level=arm.level, seed=int(seed),
                              model=dataclasses.replace(base.model))
    cfg.validate()
    return cfg


def final_collapse(history) -> float:
    last = max(h["epoch"] for h in history)
    return float(np.mean([h["collapse"] for h in history if h["epoch"] == last]))


def run_arm(dataset, arm: Arm, seed: int, base: trainer.TrainConfig, out_dir=None,
            images=None, truth=None, collapse_fraction: float = 0.05, k: int = 5) -> dict:
    """Train one arm, embed the whole dataset and compute its metric row."""
    cfg = arm_config(base, arm, seed)
    row = {"arm": arm.name, "label": arm.label, "strategy": arm.strategy, "n": arm.n,
           "N_P": cfg.N_P, "normalization": arm.normalization, "level": arm.level,
           "seed": int(seed), "status": "ok", "error": ""}
    if images is None:
        images, _ = imageproc.preprocess_dataset(dataset, arm.normalization)
    state, history = trainer.train_run(dataset, cfg, out_dir, images=images)
    single = profiles.extract_single_cell_profiles(state.teacher, dataset, arm.normalization,
                                                   images=images)
    levels = profiles.build_levels(single, engineered=False)
    if out_dir is not None:
        for name, table in levels.items():
            if name != "single_cell":
                profiles.save_table(table, Path(out_dir) / "tables" / name)
    row.update(metrics.profile_metrics(levels["batch_gene"], k))
    if truth is not None and truth.edges:
        curve = dict((p, r) for p, r, _ in metrics.pr_curve(levels["consensus_gene"], truth, [5, 10]))
        row["recall_5"], row["recall_10"] = curve[5.0], curve[10.0]
    row["collapse_final"] = final_collapse(history)
    row["collapse_flag"] = bool(row["collapse_final"] < collapse_fraction * math.log(cfg.model.n_prototypes))
    row["steps"] = len(history)
    return row


def _worker(args):
    dataset_dir, arm, seed, base_dict, out_dir, collapse_fraction, k, threads = args
    if threads:
        torch.set_num_threads(int(threads))
    dataset = synthgen.load_dataset(dataset_dir)
    truth = metrics.read_truth(Path(dataset_dir) / "truth_edges.csv")
    base = trainer.TrainConfig.from_dict(base_dict)
    return _safe_run(dataset, arm, seed, base, out_dir, None, truth, collapse_fraction, k)


def _safe_run(dataset, arm, seed, base, out_dir, images, truth, collapse_fraction, k):
    try:
        return run_arm(dataset, arm, seed, base, out_dir, images, truth, collapse_fraction, k)
    except Exception as exc:  # one failing arm must not stop the grid
        log.error("arm %s seed %d failed: %s", arm.name, seed, exc)
        log.debug("%s", traceback.format_exc())
        return {"arm": arm.name, "label": arm.label, "strategy": arm.strategy, "n": arm.n,
                "normalization": arm.normalization, "level": arm.level, "seed": int(seed),
                "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def run_grid(dataset, dataset_dir, arms, seeds, base: trainer.TrainConfig, out_dir,
             collapse_fraction: float = 0.05, k: int = 5, workers: int = 1,
             threads: int | None = None) -> list[dict]:
    out = Path(out_dir)
    jobs = [(arm, s) for arm in arms for s in seeds]
    truth = metrics.read_truth(Path(dataset_dir) / "truth_edges.csv")
    if workers > 1:
        args = [(str(dataset_dir), arm, s, base.to_dict(), out / "arms" / f"{arm.name}_seed{s}",
                 collapse_fraction, k, threads) for arm, s in jobs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_worker, args))
    else:
        cache = {}
        rows = []
        for arm, s in jobs:
            if arm.normalization not in cache:
                try:
                    cache[arm.normalization] = imageproc.preprocess_dataset(dataset, arm.normalization)[0]
                except Exception as exc:
                    cache[arm.normalization] = exc
            imgs = cache[arm.normalization]
            if isinstance(imgs, Exception):
                rows.append(_safe_run(dataset, arm, s, base, None, None, truth, collapse_fraction, k))
                continue
            rows.append(_safe_run(dataset, arm, s, base, out / "arms" / f"{arm.name}_seed{s}",
                                  imgs, truth, collapse_fraction, k))
    return rows


def write_results(rows, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({f: r.get(f, "") for f in RESULT_FIELDS})
    summary = summarize(rows)
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        fields = list(summary[0]) if summary else ["arm"]
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "summary": summary},
                                                  sort_keys=True, indent=1, default=str) + "\n")
    return path


def summarize(rows) -> list[dict]:
    """Mean over seeds per arm, Table-2 style (percentages for accuracies)."""
    out = []
    for arm in dict.fromkeys(r["arm"] for r in rows):
        ok = [r for r in rows if r["arm"] == arm and r["status"] == "ok"]
        first = next(r for r in rows if r["arm"] == arm)
        entry = {"arm": arm, "label": first["label"], "seeds_ok": len(ok),
                 "seeds_failed": sum(r["arm"] == arm and r["status"] != "ok" for r in rows)}
        for key in ("batch_knn", "graph_connectivity", "reproducibility_knn", "map",
                    "recall_5", "recall_10", "collapse_final"):
            vals = [r[key] for r in ok if r.get(key) is not None and r.get(key) != ""]
            entry[key] = float(np.mean(vals)) if vals else None
        entry["collapse_flagged_seeds"] = sum(bool(r.get("collapse_flag")) for r in ok)
        out.append(entry)
    return out


def ablate(cfg: dict, out_dir) -> Path:
    """Generate (or reuse) the shared dataset, run every arm and write the tables."""
    out = Path(out_dir)
    base = config_mod.train_config(cfg)
    arms = [parse_arm(a, base) for a in cfg["ablate.arms"]]
    seeds = [int(s) for s in cfg["ablate.seeds"]]
    data_dir = out / "dataset"
    if (data_dir / "manifest.jsonl").exists():
        dataset = synthgen.load_dataset(data_dir)
    else:
        world = synthgen.generate_world(config_mod.world_config(cfg), cfg["dataset.seed"])
        dataset = synthgen.generate_dataset(world, cfg["dataset.cells_per_guide_per_batch"],
                                            cfg["dataset.seed"])
        synthgen.save_dataset(dataset, data_dir)
    rows = run_grid(dataset, data_dir, arms, seeds, base, out, cfg["ablate.collapse_fraction"],
                    cfg["evaluate.k"], int(cfg["ablate.workers"]))
    return write_results(rows, out)
