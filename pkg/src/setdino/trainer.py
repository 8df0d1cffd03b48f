"""Student/teacher set-consistency training.

One step: sample set pairs, crop every cell, average crop embeddings within
each set (one set-view per crop index), run the teacher on global set-views
and the student on all of them, and minimise the cross-entropy between
centered/sharpened teacher outputs and student outputs over every
(teacher view, student view) pair except same-index globals. The teacher
then follows the student by EMA and the center tracks teacher logits.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import encoder, imageproc, sampler
from .errors import ConfigError, InfeasibleSamplingError, NumericError, ShapeError

log = logging.getLogger(__name__)

EPS = 1e-12
HISTORY_FIELDS = ("step", "epoch", "loss", "lr", "wd", "momentum", "collapse")


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 200
    base_lr: float = 5e-4
    warmup_epochs: int = 2
    final_lr: float = 1e-6
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    teacher_momentum: float = 0.996
    teacher_momentum_end: float = 1.0
    teacher_temperature: float = 0.01
    student_temperature: float = 0.1
    center_momentum: float = 0.9
    n_global: int = 2
    n_local: int = 8
    local_size: int = 24
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (0.15, 0.4)
    strategy: str = "cross_batch"
    level: str = "sgRNA"
    budget: int = 128
    n: int = 8
    include_ntc: bool = True
    normalization: str = "ntc_zscore"
    train_split: str = "train"  # "all" trains on every batch
    clip_grad: float = 3.0
    seed: int = 0
    model: encoder.ViTConfig = field(default_factory=encoder.ViTConfig)

    @property
    def N_P(self) -> int:
        return self.budget // self.n

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("train.epochs", "epochs and steps_per_epoch must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs")
        if self.teacher_temperature <= 0 or self.student_temperature <= 0:
            raise ConfigError("train.teacher_temperature", "temperatures must be > 0")
        for name in ("teacher_momentum", "teacher_momentum_end", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.{name}", "must lie in [0, 1]")
        if self.center_momentum >= 1.0:
            raise ConfigError("train.center_momentum", "must be < 1")
        if self.n < 1 or self.budget < self.n or self.budget % self.n:
            raise ConfigError("train.budget", "budget must be a positive multiple of n")
        if self.n_global < 1 or self.n_global + self.n_local < 2:
            raise ConfigError("train.n_global", "need >= 1 global crop and >= 2 crops in total")
        if self.strategy not in sampler.STRATEGIES:
            raise ConfigError("train.strategy", f"must be one of {sampler.STRATEGIES}")
        if self.level not in sampler.LEVELS:
            raise ConfigError("train.level", f"must be one of {sampler.LEVELS}")
        if self.normalization not in imageproc.NORMALIZATIONS:
            raise ConfigError("train.normalization", f"must be one of {imageproc.NORMALIZATIONS}")
        if self.local_size % self.model.patch_size:
            raise ConfigError("train.local_size", "must be divisible by model.patch_size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = encoder.ViTConfig(**data.pop("model", {}))
        for key in ("global_scale", "local_scale"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(model=model, **data)


# ---- loss and update rules -------------------------------------------------------

def cross_entropy_pairs(teacher_probs, student_logprobs):
    """Mean of H(t, s) over all view pairs with different indices.

    ``teacher_probs`` is ``[T, ..., K]``, ``student_logprobs`` ``[S, ..., K]``;
    teacher view ``i`` and student view ``i`` come from the same crop index and
    are skipped.
    """
    if teacher_probs.shape[-1] != student_logprobs.shape[-1]:
        raise ShapeError(f"prototype count mismatch: {teacher_probs.shape[-1]} vs "
                         f"{student_logprobs.shape[-1]}")
    total = 0
    n_terms = 0
    for it, q in enumerate(teacher_probs):
        for iv in range(len(student_logprobs)):
            if iv == it:
                continue
            total = total + torch.sum(-q * student_logprobs[iv], dim=-1).mean()
            n_terms += 1
    if n_terms == 0:
        raise ShapeError("no (teacher, student) view pairs with different crop indices")
    return total / n_terms


def set_dino_loss(student_views, teacher_views):
    """Cross-entropy loss between lists of student and teacher probability vectors.

    Teacher views are detached; student probabilities are clamped at 1e-12
    before the log.
    """
    s = torch.stack([torch.as_tensor(v) for v in student_views])
    t = torch.stack([torch.as_tensor(v) for v in teacher_views]).detach()
    return cross_entropy_pairs(t, torch.log(s.clamp_min(EPS)))


def _tensors(obj):
    if isinstance(obj, nn.Module):
        return dict(obj.named_parameters())
    return obj


@torch.no_grad()
def ema_update(teacher, student, momentum: float):
    """In place: teacher <- momentum * teacher + (1 - momentum) * student."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError("momentum", "must lie in [0, 1]")
    t_params, s_params = _tensors(teacher), _tensors(student)
    if t_params.keys() != s_params.keys():
        raise ShapeError("teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: shape {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    return teacher


@torch.no_grad()
def update_center(center, teacher_logits, momentum: float):
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("center_momentum", "must lie in [0, 1)")
    logits = torch.as_tensor(teacher_logits)
    if logits.shape[0] == 0:
        warnings.warn("empty teacher batch; center unchanged", RuntimeWarning, stacklevel=2)
        return center
    return center * momentum + logits.mean(dim=0) * (1.0 - momentum)


SCHEDULES = ("cosine_lr_with_warmup", "cosine_wd", "cosine_teacher_momentum")


def schedule(step: int, total_steps: int, kind: str, start: float, end: float,
             warmup_steps: int = 0) -> float:
    """Value of a DINO-style schedule at ``step``.

    The learning rate rises linearly from 0 to ``start`` over ``warmup_steps``
    then follows a half cosine down to ``end``; weight decay and teacher
    momentum follow a half cosine from ``start`` to ``end``. Endpoints are exact.
    """
    if kind not in SCHEDULES:
        raise ConfigError("schedule", f"unknown kind {kind!r}")
    if not 0 <= step <= total_steps:
        raise ConfigError("step", f"must lie in [0, {total_steps}]")
    if kind != "cosine_lr_with_warmup":
        warmup_steps = 0
    if step < warmup_steps:
        return start * step / warmup_steps
    span = total_steps - warmup_steps
    if step == warmup_steps:
        return float(start)
    if step == total_steps:
        return float(end)
    progress = (step - warmup_steps) / span
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def collapse_indicator(probs) -> float:
    """Jensen gap H(mean p) - mean H(p); 0 when all outputs coincide."""
    p = torch.as_tensor(probs, dtype=torch.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ShapeError("need a [B >= 2, K] batch of probability vectors")

    def entropy(x):
        return -(x * torch.log(x.clamp_min(1e-300))).sum(-1)

    gap = entropy(p.mean(0)) - entropy(p).mean()
    return max(float(gap), 0.0)


# ---- state -------------------------------------------------------------------------

def param_groups(net):
    regularized, plain = [], []
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        (plain if name.endswith(".bias") or p.ndim == 1 else regularized).append(p)
    return [{"params": regularized}, {"params": plain, "weight_decay": 0.0}]


@dataclass
class TrainState:
    student: encoder.SetDinoNetwork
    teacher: encoder.SetDinoNetwork
    center: torch.Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0  # completed epochs
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    student = encoder.build_network(cfg.model, seed=cfg.seed, dtype=dtype)
    teacher = encoder.build_network(cfg.model, seed=cfg.seed, dtype=dtype)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(param_groups(student), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    center = torch.zeros(cfg.model.n_prototypes, dtype=dtype)
    return TrainState(student, teacher, center, opt)


def step_hyperparameters(cfg: TrainConfig, step: int) -> dict:
    last = max(cfg.total_steps - 1, 1)
    warm = cfg.warmup_epochs * cfg.steps_per_epoch
    return {
        "lr": schedule(step, last, "cosine_lr_with_warmup", cfg.base_lr, cfg.final_lr, warm),
        "wd": schedule(step, last, "cosine_wd", cfg.weight_decay, cfg.weight_decay_end),
        "momentum": schedule(step, last, "cosine_teacher_momentum", cfg.teacher_momentum,
                             cfg.teacher_momentum_end),
    }


def crop_rng(seed: int, step: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xC409, int(step)]))


def make_views(images, plan, cfg: TrainConfig, rng, positions=None):
    """Crop every cell of every set pair.

    Returns ``(student_global [G, P*n, ...], student_local [L, P*n, ...],
    teacher_global [G, P*n, ...])``, set-major within each crop index. Under
    same_cells the teacher reuses the student's global crops.
    """
    gsize, lsize = cfg.model.image_size, cfg.local_size
    kw = dict(global_size=gsize, local_size=lsize, global_scale=cfg.global_scale,
              local_scale=cfg.local_scale)
    sg, sl, tg = [], [], []
    for pair in plan.set_pairs:
        s_crops = []
        for cell in pair.student_set:
            idx = positions[cell] if positions is not None else cell
            s_crops.append(imageproc.multicrop(images[idx], cfg.n_global, cfg.n_local, rng, **kw))
        if pair.strategy == "same_cells":
            t_globals = [g for g, _ in s_crops]
        else:
            t_globals = []
            for cell in pair.teacher_set:
                idx = positions[cell] if positions is not None else cell
                t_globals.append(imageproc.multicrop(images[idx], cfg.n_global, 0, rng, **kw)[0])
        sg.extend(g for g, _ in s_crops)
        sl.extend(loc for _, loc in s_crops)
        tg.extend(t_globals)
    # [cells, V, C, h, w] -> [V, cells, C, h, w]
    return (torch.stack(sg).transpose(0, 1), torch.stack(sl).transpose(0, 1),
            torch.stack(tg).transpose(0, 1))


def set_view_logits(net, views, set_size):
    """[V, P*n, C, h, w] crops -> [V, P, K] logits of set-averaged embeddings."""
    V, cells = views.shape[:2]
    if V == 0:
        return None
    emb = net.backbone(views.reshape(V * cells, *views.shape[2:]))
    emb = encoder.aggregate(emb.reshape(V, cells // set_size, set_size, -1), dim=2)
    return net.head(emb)


def student_logits(net, sg, sl, set_size):
    parts = [set_view_logits(net, sg, set_size)]
    if sl.shape[0]:
        parts.append(set_view_logits(net, sl, set_size))
    return torch.cat(parts, dim=0)


def training_step(state: TrainState, plan, images, cfg: TrainConfig, rng, hp: dict,
                  positions=None) -> dict:
    n = plan.n
    dtype = state.center.dtype
    sg, sl, tg = (v.to(dtype) for v in make_views(images, plan, cfg, rng, positions))
    state.student.train()
    s_logits = student_logits(state.student, sg, sl, n)
    with torch.no_grad():
        t_logits = set_view_logits(state.teacher, tg, n)
        t_probs = torch.softmax((t_logits - state.center) / cfg.teacher_temperature, dim=-1)
    s_logp = torch.log_softmax(s_logits / cfg.student_temperature, dim=-1)
    loss = cross_entropy_pairs(t_probs, s_logp)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}", plan)

    opt = state.optimizer
    for i, group in enumerate(opt.param_groups):
        group["lr"] = hp["lr"]
        if i == 0:
            group["weight_decay"] = hp["wd"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_grad > 0:
        nn.utils.clip_grad_norm_(state.student.parameters(), cfg.clip_grad)
    opt.step()
    ema_update(state.teacher, state.student, hp["momentum"])
    K = t_logits.shape[-1]
    state.center = update_center(state.center, t_logits.reshape(-1, K), cfg.center_momentum)
    return {"loss": loss.item(), "collapse": collapse_indicator(t_probs.reshape(-1, K))}


# ---- persistence -------------------------------------------------------------------

def _optimizer_tensors(opt):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"optim.{idx}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    opt_tensors, groups = _optimizer_tensors(state.optimizer)
    extra = {"center": state.center, **opt_tensors}
    meta = {"model": encoder.config_dict(cfg.model), "train": cfg.to_dict(), "step": state.step,
            "epoch": state.epoch, "history": state.history, "optimizer_groups": groups}
    encoder.save_checkpoint(path, {"student": state.student, "teacher": state.teacher}, meta, extra)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    tensors, meta = encoder.load_checkpoint(path)
    cfg = cfg or TrainConfig.from_dict(meta["train"])
    dtype = torch.from_numpy(tensors["center"]).dtype
    state = init_state(cfg, dtype=dtype)
    for which in ("student", "teacher"):
        net = getattr(state, which)
        prefix = f"{which}."
        net.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items()
                             if k.startswith(prefix)})
    state.center = torch.from_numpy(tensors["center"])
    opt_state = {}
    for key, val in tensors.items():
        if key.startswith("optim."):
            _, idx, name = key.split(".", 2)
            opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(val)
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["optimizer_groups"]})
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.history = list(meta["history"])
    return state, cfg


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def training_positions(dataset, split: str):
    if split == "all":
        return np.arange(len(dataset.records))
    pos = np.array([i for i, r in enumerate(dataset.records) if r.split == split], dtype=np.int64)
    if pos.size == 0:
        raise ConfigError("train.train_split", f"no cells in split {split!r}")
    return pos


def train_run(dataset, cfg: TrainConfig, out_dir=None, resume: bool = True, images=None,
              dtype=torch.float32, stop_after_epoch: int | None = None):
    """Train on ``dataset``; returns ``(TrainState, history)``.

    With ``out_dir`` a checkpoint is written after every epoch
    (``epoch_XXX.ckpt`` and ``last.ckpt``) together with ``history.csv`` and
    ``config.json``; ``resume`` picks up from ``last.ckpt``.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if images is None:
        images, _ = imageproc.preprocess_dataset(dataset, cfg.normalization)
    images = torch.from_numpy(np.ascontiguousarray(images))
    positions = training_positions(dataset, cfg.train_split)
    records = [dataset.records[i] for i in positions]

    state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
        if resume and (out / "last.ckpt").exists():
            state, _ = load_state(out / "last.ckpt", cfg)
            log.info("resuming from epoch %d (step %d)", state.epoch, state.step)
    if state is None:
        state = init_state(cfg, dtype=dtype)

    index = sampler.PerturbationIndex(records, cfg.level, cfg.include_ntc)
    if not any(index.feasible(p, cfg.strategy, cfg.n) for p in index.perturbations):
        raise sampler_infeasible(records, cfg)

    for epoch in range(state.epoch, cfg.epochs):
        for plan in sampler.epoch_iterator(records, cfg.strategy, cfg.level, cfg.N_P, cfg.n,
                                           cfg.steps_per_epoch, cfg.seed, epoch, cfg.include_ntc):
            hp = step_hyperparameters(cfg, state.step)
            try:
                stats = training_step(state, plan, images, cfg, crop_rng(cfg.seed, state.step), hp,
                                      positions)
            except NumericError as exc:
                if out is not None:
                    (out / f"failed_step_{state.step}.json").write_text(plan.to_json())
                raise NumericError(f"{exc.args[0]}; plan dumped to run directory") from exc
            state.history.append({"step": state.step, "epoch": epoch, **stats, **hp})
            state.step += 1
        state.epoch = epoch + 1
        if out is not None:
            save_state(out / f"epoch_{epoch:03d}.ckpt", state, cfg)
            save_state(out / "last.ckpt", state, cfg)
            write_history_csv(out / "history.csv", state.history)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
    return state, state.history


def sampler_infeasible(records, cfg):
    rep = sampler.feasibility_report(records, cfg.strategy, cfg.level, cfg.n, cfg.include_ntc)
    return InfeasibleSamplingError(
        f"no perturbation can form {cfg.strategy} set pairs with n={cfg.n}: {json.dumps(rep)}")
