import logging
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from setdino import sampler
from setdino.errors import ConfigError


@dataclass
class R:
    guide_id: int
    gene_id: int
    batch_id: int
    is_ntc: bool = False


def manifest(counts, guides_per_gene=2):
    """counts[(guide, batch)] = cells."""
    out = []
    for (g, b), c in sorted(counts.items()):
        out += [R(g, g // guides_per_gene, b, g < 0) for _ in range(c)]
    return out


def check_pair(pair, records, n, level):
    assert len(pair.student_set) == len(pair.teacher_set) == n
    key = (lambda r: r.guide_id) if level == "sgRNA" else (lambda r: r.gene_id)
    for pos in pair.student_set:
        assert records[pos].batch_id == pair.student_batch
        assert key(records[pos]) == pair.perturbation_id
    for pos in pair.teacher_set:
        assert records[pos].batch_id == pair.teacher_batch
        assert key(records[pos]) == pair.perturbation_id
    assert len(set(pair.student_set)) == n and len(set(pair.teacher_set)) == n
    if pair.strategy == "same_cells":
        assert pair.student_set == pair.teacher_set
    elif pair.strategy == "within_batch":
        assert pair.student_batch == pair.teacher_batch
        assert not set(pair.student_set) & set(pair.teacher_set)
    else:
        assert pair.student_batch != pair.teacher_batch


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 7), st.integers(0, 3)), st.integers(0, 9),
                       min_size=1, max_size=25),
       st.sampled_from(sampler.STRATEGIES), st.sampled_from(sampler.LEVELS),
       st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_pairs_respect_strategy_contract(counts, strategy, level, n, N_P, seed):
    records = manifest(counts)
    if not records:
        return
    plan = sampler.build_minibatch(records, strategy, level, N_P, n, np.random.default_rng(seed))
    assert len(plan.set_pairs) <= N_P
    perts = [p.perturbation_id for p in plan.set_pairs]
    assert len(perts) == len(set(perts))
    for pair in plan.set_pairs:
        check_pair(pair, records, n, level)
    index = sampler.PerturbationIndex(records, level)
    feasible = sum(index.feasible(p, strategy, n) for p in index.perturbations)
    assert len(plan.set_pairs) == min(N_P, feasible)


def test_same_cells_n1_is_singleton():
    records = manifest({(0, 0): 3, (1, 0): 3})
    plan = sampler.build_minibatch(records, "same_cells", "sgRNA", 2, 1, np.random.default_rng(0))
    for p in plan.set_pairs:
        assert len(p.student_set) == 1 and p.student_set == p.teacher_set


def test_single_batch_cross_batch_is_empty(caplog):
    records = manifest({(0, 0): 5, (1, 0): 5})
    with caplog.at_level(logging.WARNING, logger="setdino.sampler"):
        plan = sampler.build_minibatch(records, "cross_batch", "sgRNA", 2, 1, np.random.default_rng(0))
    assert plan.set_pairs == ()
    assert "infeasible" in caplog.text


def test_bad_arguments():
    records = manifest({(0, 0): 2})
    rng = np.random.default_rng(0)
    for args in (("mixed", "sgRNA", 1, 1), ("same_cells", "cell", 1, 1),
                 ("same_cells", "sgRNA", 1, 0), ("same_cells", "sgRNA", 0, 1)):
        with pytest.raises(ConfigError):
            sampler.build_minibatch(records, *args, rng)
    with pytest.raises(ConfigError):
        list(sampler.epoch_iterator(records, "same_cells", "sgRNA", 1, 1, 0, seed=0))


def test_retry_cap_limits_skips():
    records = manifest({(g, 0): (1 if g < 6 else 4) for g in range(8)})
    short = sampler.build_minibatch(records, "within_batch", "sgRNA", 2, 2, np.random.default_rng(1),
                                    retry_cap=0)
    full = sampler.build_minibatch(records, "within_batch", "sgRNA", 2, 2, np.random.default_rng(1))
    assert len(full.set_pairs) == 2
    assert len(short.set_pairs) <= 2


def test_epoch_iterator_determinism_and_length():
    records = manifest({(g, b): 6 for g in range(10) for b in range(3)})
    a = [p.to_json() for p in sampler.epoch_iterator(records, "cross_batch", "sgRNA", 4, 2, 200, seed=7)]
    b = [p.to_json() for p in sampler.epoch_iterator(records, "cross_batch", "sgRNA", 4, 2, 200, seed=7)]
    c = [p.to_json() for p in sampler.epoch_iterator(records, "cross_batch", "sgRNA", 4, 2, 200, seed=7,
                                                     epoch=1)]
    assert len(a) == 200 and a == b and a != c


def test_gene_target_sets_can_mix_guides():
    records = manifest({(g, b): 4 for g in range(4) for b in range(2)}, guides_per_gene=2)
    mixed = False
    for plan in sampler.epoch_iterator(records, "within_batch", "gene_target", 2, 3, 50, seed=0):
        for pair in plan.set_pairs:
            check_pair(pair, records, 3, "gene_target")
            mixed |= len({records[i].guide_id for i in pair.student_set}) > 1
    assert mixed


def test_ntc_switch():
    records = manifest({(-1, 0): 4, (0, 0): 4})
    with_ntc = sampler.PerturbationIndex(records, "sgRNA")
    without = sampler.PerturbationIndex(records, "sgRNA", include_ntc=False)
    assert -1 in with_ntc.perturbations and -1 not in without.perturbations


def test_selection_frequency_uniform():
    # 12 feasible perturbations and 3 infeasible ones; 4 drawn per minibatch
    counts = {(g, b): 5 for g in range(12) for b in range(3)}
    counts.update({(g, 0): 5 for g in range(12, 15)})
    records = manifest(counts)
    steps = 3000
    freq = np.zeros(15)
    for plan in sampler.epoch_iterator(records, "cross_batch", "sgRNA", 4, 2, steps, seed=3):
        for pair in plan.set_pairs:
            freq[pair.perturbation_id] += 1
    assert np.all(freq[12:] == 0)
    obs = freq[:12]
    expected = steps * 4 / 12
    assert obs.sum() == steps * 4
    # each count is Binomial(steps, 4/12) marginally
    sigma = np.sqrt(steps * (4 / 12) * (8 / 12))
    assert np.all(np.abs(obs - expected) <= 3 * sigma)
    assert stats.chisquare(obs).pvalue > 1e-3


def test_batch_pairs_uniform():
    records = manifest({(0, b): 3 for b in range(4)})
    seen = np.zeros((4, 4))
    rng = np.random.default_rng(0)
    index = sampler.PerturbationIndex(records, "sgRNA")
    for _ in range(6000):
        p = sampler.build_minibatch(records, "cross_batch", "sgRNA", 1, 1, rng, index=index).set_pairs[0]
        seen[p.student_batch, p.teacher_batch] += 1
    assert np.all(np.diag(seen) == 0)
    obs = seen[~np.eye(4, dtype=bool)]
    assert stats.chisquare(obs).pvalue > 1e-3
