"""Minibatch construction for set-consistency training.

A minibatch holds ``N_P`` perturbations; for each one a (student, teacher)
pair of ``n``-cell sets is drawn according to the sampling strategy.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

STRATEGIES = ("same_cells", "within_batch", "cross_batch")
LEVELS = ("sgRNA", "gene_target")


@dataclass(frozen=True)
class SetPair:
    perturbation_id: int
    student_set: tuple
    teacher_set: tuple
    student_batch: int
    teacher_batch: int
    strategy: str
    level: str


@dataclass(frozen=True)
class MinibatchPlan:
    set_pairs: tuple
    N_P: int
    n: int
    epoch: int = 0
    step: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check(strategy, level, N_P, n):
    if strategy not in STRATEGIES:
        raise ConfigError("strategy", f"must be one of {STRATEGIES}")
    if level not in LEVELS:
        raise ConfigError("level", f"must be one of {LEVELS}")
    if n < 1:
        raise ConfigError("n", "must be >= 1")
    if N_P < 1:
        raise ConfigError("N_P", "must be >= 1")


class PerturbationIndex:
    """Cell positions grouped by (perturbation, batch), plus feasibility.

    ``records`` are CellRecords; positions returned in plans index into it.
    At gene_target level all NTC guides form one perturbation (id -1).
    """

    def __init__(self, records, level: str, include_ntc: bool = True):
        self.level = level
        cells = defaultdict(list)
        for pos, r in enumerate(records):
            if r.is_ntc and not include_ntc:
                continue
            pert = r.guide_id if level == "sgRNA" else r.gene_id
            cells[(pert, r.batch_id)].append(pos)
        self.cells = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}
        by_pert = defaultdict(dict)
        for (pert, batch), pos in self.cells.items():
            by_pert[pert][batch] = len(pos)
        self.batch_counts = {p: dict(sorted(b.items())) for p, b in sorted(by_pert.items())}
        self.perturbations = sorted(self.batch_counts)

    def eligible_batches(self, pert, strategy, n):
        counts = self.batch_counts.get(pert, {})
        need = 2 * n if strategy == "within_batch" else n
        return [b for b, c in counts.items() if c >= need]

    def feasible(self, pert, strategy, n) -> bool:
        ok = self.eligible_batches(pert, strategy, n)
        return len(ok) >= 2 if strategy == "cross_batch" else len(ok) >= 1


def _draw_pair(index, pert, strategy, level, n, rng):
    ok = index.eligible_batches(pert, strategy, n)
    if strategy == "cross_batch":
        i, j = rng.choice(len(ok), size=2, replace=False)
        b, b2 = ok[i], ok[j]
        s = rng.choice(index.cells[(pert, b)], size=n, replace=False)
        t = rng.choice(index.cells[(pert, b2)], size=n, replace=False)
    else:
        b = b2 = ok[int(rng.integers(len(ok)))]
        pool = index.cells[(pert, b)]
        if strategy == "same_cells":
            s = t = rng.choice(pool, size=n, replace=False)
        else:
            both = rng.choice(pool, size=2 * n, replace=False)
            s, t = both[:n], both[n:]
    return SetPair(int(pert), tuple(int(x) for x in s), tuple(int(x) for x in t),
                   int(b), int(b2), strategy, level)


def build_minibatch(records, strategy: str, level: str, N_P: int, n: int, rng,
                    include_ntc: bool = True, index: PerturbationIndex | None = None,
                    retry_cap: int | None = None) -> MinibatchPlan:
    """Sample one minibatch plan.

    Perturbations are drawn uniformly without replacement; an infeasible one
    is replaced by the next candidate, up to ``retry_cap`` replacements (all
    of the pool by default), after which the plan is returned short with a
    warning.
    """
    _check(strategy, level, N_P, n)
    if index is None:
        index = PerturbationIndex(records, level, include_ntc)
    order = rng.permutation(len(index.perturbations))
    cap = len(order) if retry_cap is None else int(retry_cap)
    pairs = []
    skipped = 0
    for k in order:
        if len(pairs) == N_P:
            break
        pert = index.perturbations[k]
        if not index.feasible(pert, strategy, n):
            skipped += 1
            if skipped > cap:
                break
            continue
        pairs.append(_draw_pair(index, pert, strategy, level, n, rng))
    if len(pairs) < N_P:
        log.warning("minibatch has %d of %d set pairs (%s, n=%d): %d perturbations infeasible",
                    len(pairs), N_P, strategy, n, skipped)
    return MinibatchPlan(tuple(pairs), int(N_P), int(n))


def epoch_iterator(records, strategy: str, level: str, N_P: int, n: int, steps_per_epoch: int,
                   seed: int, epoch: int = 0, include_ntc: bool = True):
    """Yield ``steps_per_epoch`` plans; the stream depends only on (seed, epoch)."""
    if steps_per_epoch < 1:
        raise ConfigError("steps_per_epoch", "must be >= 1")
    _check(strategy, level, N_P, n)
    index = PerturbationIndex(records, level, include_ntc)
    n_bad = sum(not index.feasible(p, strategy, n) for p in index.perturbations)
    if n_bad:
        log.warning("%d of %d perturbations cannot form %s sets of n=%d",
                    n_bad, len(index.perturbations), strategy, n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB47C, int(epoch)]))
    for step in range(steps_per_epoch):
        plan = build_minibatch(records, strategy, level, N_P, n, rng, index=index)
        yield MinibatchPlan(plan.set_pairs, plan.N_P, plan.n, int(epoch), step)


def feasibility_report(records, strategy, level, n, include_ntc=True) -> dict:
    index = PerturbationIndex(records, level, include_ntc)
    feasible = [p for p in index.perturbations if index.feasible(p, strategy, n)]
    return {"strategy": strategy, "level": level, "n": n,
            "perturbations": len(index.perturbations), "feasible": len(feasible),
            "batches": sorted({b for counts in index.batch_counts.values() for b in counts})}
