"""Command-line entry point: ``setdino synth|train|embed|evaluate|ablate|report``."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import config as config_mod
from .errors import ConfigError, SetDinoError, StorageError

log = logging.getLogger("setdino")

MANIFEST = "run.json"


class RunManifest:
    """``run.json`` of a run directory: config hash, seed, and per-stage outputs."""

    def __init__(self, out_dir, config_hash: str, seed):
        self.path = Path(out_dir) / MANIFEST
        self.data = {"run_id": config_hash[:12], "config_hash": config_hash, "seed": seed,
                     "tool_version": __version__, "stages": {}}
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
            except (OSError, ValueError):
                old = {}
            if old.get("config_hash") == config_hash:
                self.data["stages"] = old.get("stages", {})

    def done(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if not entry or "finished" not in entry:
            return False
        base = self.path.parent
        return all((base / p).exists() for p in entry.get("outputs", []))

    def start(self, stage: str) -> None:
        self.data["stages"][stage] = {"started": _now()}
        self.write()

    def finish(self, stage: str, outputs) -> None:
        base = self.path.parent
        rel = [str(Path(p).resolve().relative_to(base.resolve())) if Path(p).is_absolute()
               or str(p).startswith(str(base)) else str(p) for p in outputs]
        self.data["stages"][stage].update(outputs=rel, finished=_now())
        self.write()

    def write(self) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.data, sort_keys=True, indent=1) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write {self.path}: {exc}") from exc


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _config(args, seed_keys=("dataset.seed", "train.seed")) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides = {k: args.seed for k in seed_keys}
    return config_mod.load_config(getattr(args, "config", None), overrides=overrides)


def _stage(args, out_dir, stage, cfg_hash, seed, fn):
    """Run ``fn`` unless the manifest shows the same stage finished with the same hash."""
    manifest = RunManifest(out_dir, cfg_hash, seed)
    if manifest.done(stage) and not args.force:
        outputs = manifest.data["stages"][stage]["outputs"]
        print(f"{stage}: up to date ({Path(out_dir) / outputs[0]}); use --force to rerun")
        return Path(out_dir) / outputs[0]
    manifest.start(stage)
    outputs = fn()
    manifest.finish(stage, outputs)
    return Path(outputs[0])


def _hash(cfg, prefixes, extra=None) -> str:
    payload = {k: v for k, v in cfg.items() if any(k.startswith(p) for p in prefixes)}
    payload["__extra__"] = extra or {}
    return config_mod.config_hash(payload)


# ---- verbs --------------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import synthgen
    cfg = _config(args)
    out = Path(args.out)

    def run():
        world = synthgen.generate_world(config_mod.world_config(cfg), cfg["dataset.seed"])
        ds = synthgen.generate_dataset(world, cfg["dataset.cells_per_guide_per_batch"],
                                       cfg["dataset.seed"])
        manifest = synthgen.save_dataset(ds, out)
        (out / "config.cfg").write_text(config_mod.dump_config(cfg))
        return [manifest, out / "world.json", out / "truth_edges.csv"]

    path = _stage(args, out, "synth", _hash(cfg, ("world.", "dataset.")), cfg["dataset.seed"], run)
    print(path)
    return 0


def cmd_train(args) -> int:
    from . import synthgen, trainer
    cfg = _config(args)
    tc = config_mod.train_config(cfg)
    out = Path(args.out)
    data_hash = _dataset_hash(args.dataset)

    def run():
        ds = synthgen.load_dataset(args.dataset)
        (out / "config.cfg").parent.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(config_mod.dump_config(cfg))
        trainer.train_run(ds, tc, out, resume=not args.force)
        return [out / "last.ckpt", out / "history.csv"]

    path = _stage(args, out, "train", _hash(cfg, ("train.",), {"dataset": data_hash}),
                  tc.seed, run)
    print(path)
    return 0


def cmd_embed(args) -> int:
    from . import profiles, report, synthgen
    cfg = _config(args)
    norm = args.normalization or cfg["embed.normalization"]
    out = Path(args.out)
    if args.checkpoint is None and not args.engineered:
        raise ConfigError("checkpoint", "give --checkpoint or --engineered")
    source = "engineered" if args.engineered else _file_hash(args.checkpoint)
    extra = {"dataset": _dataset_hash(args.dataset), "source": source, "normalization": norm}

    def run():
        ds = synthgen.load_dataset(args.dataset)
        if args.engineered:
            single = profiles.engineered_table(ds)
        else:
            single = profiles.extract_single_cell_profiles(args.checkpoint, ds, norm,
                                                           batch_size=cfg["embed.batch_size"])
        levels = profiles.build_levels(single, variance_cutoff=cfg["embed.engineered_pca_cutoff"])
        paths = report.write_levels(levels, out)
        return [paths["consensus_gene"], paths["batch_gene"], paths["single_cell"],
                paths["batch_guide"]]

    path = _stage(args, out, "embed", _hash(cfg, ("embed.",), extra), None, run)
    print(path.parent)
    return 0


def cmd_evaluate(args) -> int:
    from . import report
    cfg = _config(args)
    out = Path(args.out)
    curated = args.curated_truth
    if curated is None:
        guess = Path(args.truth).with_name("truth_edges_curated.csv")
        curated = guess if guess.exists() and guess != Path(args.truth) else None
    extra = {"tables": {p.name: _file_hash(p) for p in sorted(Path(args.tables).glob("*.f32"))},
             "truth": _file_hash(args.truth),
             "curated": _file_hash(curated) if curated else None}

    def run():
        rep = report.evaluate_tables(args.tables, args.truth, out, curated,
                                     k=cfg["evaluate.k"], percentiles=cfg["evaluate.percentiles"],
                                     pca_components=cfg["evaluate.pca_components"])
        print(report.headline_table(rep))
        return [out / "metrics.json"]

    path = _stage(args, out, "evaluate", _hash(cfg, ("evaluate.",), extra), None, run)
    print(path)
    return 0


def cmd_ablate(args) -> int:
    from . import ablation
    overrides = {}
    cfg = _config(args, seed_keys=("dataset.seed",))
    if args.seed is not None:
        overrides["ablate.seeds"] = [args.seed]
    if args.workers is not None:
        overrides["ablate.workers"] = args.workers
    cfg.update(overrides)
    out = Path(args.out)

    def run():
        path = ablation.ablate(cfg, out)
        (out / "config.cfg").write_text(config_mod.dump_config(cfg))
        return [path, out / "ablation_summary.csv"]

    path = _stage(args, out, "ablate", config_mod.config_hash(cfg), cfg["dataset.seed"], run)
    print(path)
    return 0


def cmd_report(args) -> int:
    from . import summary
    path = summary.write_report(args.run, args.out)
    print(path)
    return 0


def _file_hash(path) -> str:
    from .storage import file_sha256
    try:
        return file_sha256(path)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def _dataset_hash(directory) -> str:
    manifest = Path(directory) / "manifest.jsonl"
    if not manifest.exists():
        raise StorageError(f"{directory} is not a dataset directory (no manifest.jsonl)")
    return _file_hash(manifest)


# ---- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic torch kernels, single thread")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    common.add_argument("--force", action="store_true", help="rerun completed stages")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="setdino", parents=[common],
                                description="Set-consistency self-distillation on synthetic screens.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic screen")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", parents=[common], help="write profile tables")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--engineered", action="store_true", help="engineered-feature baseline")
    s.add_argument("--dataset", required=True)
    s.add_argument("--normalization", choices=("zscore", "ntc_zscore"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("evaluate", parents=[common], help="compute the metrics report")
    s.add_argument("--config")
    s.add_argument("--tables", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--curated-truth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="run a sampling-strategy grid")
    s.add_argument("--config")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="summarize a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def _setup(args) -> None:
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    import torch
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    elif args.threads:
        torch.set_num_threads(args.threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SetDinoError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except PermissionError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return StorageError.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
