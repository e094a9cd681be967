"""Acceptance criteria 1-9; criterion 10 needs a GPU and full corpora and is skipped.

Each test records one PASS/FAIL line, printed in the terminal summary.
"""
import itertools
import math
import random
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import ACCEPTANCE, random_corpus
from litset.biencoder import (BatchLabelSpace, BiEncoder, EncoderConfig, build_batch_label_space,
                              gold_local_ids, in_batch_cross_entropy, score)
from litset.builder import (KBEntityRecord, SamplingConfig, SamplingMode, filter_meta_types,
                            load_kb_records, sample_tag_count, sample_type_verbalization)
from litset.corpus import EntitySpan, Sentence, TypeInventory
from litset.evaluation import micro_f1
from litset.protocol import SplitMode, SplitSpec, sample_support_set, split_labels

FIXTURE = Path(__file__).parent / "fixtures" / "kb20.jsonl"


def check(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# -- 1 ----------------------------------------------------------------------

def _frozen_model(hidden=32, dtype=torch.float32):
    enc = f"tiny:layers=2,hidden={hidden},heads=4,vocab=1024"
    m = BiEncoder(EncoderConfig(enc, enc, max_sequence_length=64, seed=0)).to(dtype)
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def _random_batch(rng, labels, cover_all):
    types = list(labels) if cover_all else rng.sample(labels, rng.randint(1, len(labels) - 1))
    rng.shuffle(types)
    sents, pending = [], list(types)
    while pending or not sents:
        n = rng.randint(4, 10)
        spans, pos = [], 0
        while pos < n - 1 and pending and rng.random() < 0.7:
            start = rng.randint(pos, n - 2)
            end = min(n, start + rng.randint(1, 2))
            spans.append(EntitySpan(start, end, pending.pop()))
            pos = end
        sents.append(Sentence(tuple(f"w{rng.randint(0, 300)}" for _ in range(n)), tuple(spans)))
    return sents


def test_criterion_1_loss_restriction():
    start = time.perf_counter()
    labels = [f"label{i}" for i in range(20)]
    inv = TypeInventory([(t, f"type number {i} verbalized") for i, t in enumerate(labels)])
    m = _frozen_model()
    rng = random.Random(0)
    full = BatchLabelSpace.from_types(labels)
    worst, columns_ok = 0.0, True
    with torch.no_grad():
        e_full = m.label_space_embeddings(full, inv)
        for _ in range(50):
            batch = _random_batch(rng, labels, cover_all=True)
            space = build_batch_label_space(batch, inv)
            logits, alignment = m(batch, space, inv)
            local = in_batch_cross_entropy(logits, gold_local_ids(batch, alignment, space))
            e_t, alignment = m.encode_tokens(batch)
            full_loss = in_batch_cross_entropy(score(e_t, e_full), gold_local_ids(batch, alignment, full))
            worst = max(worst, abs(local.item() - full_loss.item()) / abs(full_loss.item()))
        for _ in range(50):
            batch = _random_batch(rng, labels, cover_all=False)
            space = build_batch_label_space(batch, inv)
            logits, _ = m(batch, space, inv)
            present = {sp.type_id for s in batch for sp in s.spans}
            columns_ok &= logits.shape[1] == len(present) + 1
    elapsed = time.perf_counter() - start
    check(1, worst <= 1e-6 and columns_ok and elapsed < 60,
          f"max relative loss error {worst:.2e}, subset column counts ok={columns_ok}, {elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_gradient_check():
    start = time.perf_counter()
    labels = [f"label{i}" for i in range(8)]
    inv = TypeInventory([(t, f"kind {i}") for i, t in enumerate(labels)])
    m = _frozen_model(dtype=torch.float64)
    rng = random.Random(1)
    eps, worst = 1e-4, 0.0
    for _ in range(5):
        batch = _random_batch(rng, labels, cover_all=False)
        space = build_batch_label_space(batch, inv)
        with torch.no_grad():
            e_t, alignment = m.encode_tokens(batch)
            e_l = m.label_space_embeddings(space, inv)
        gold = gold_local_ids(batch, alignment, space)
        e_t = e_t.clone().requires_grad_(True)
        in_batch_cross_entropy(score(e_t, e_l), gold).backward()
        grad = e_t.grad
        for _ in range(10):
            i, j = rng.randrange(e_t.shape[0]), rng.randrange(e_t.shape[1])
            with torch.no_grad():
                plus, minus = e_t.detach().clone(), e_t.detach().clone()
                plus[i, j] += eps
                minus[i, j] -= eps
                numeric = (in_batch_cross_entropy(score(plus, e_l), gold)
                           - in_batch_cross_entropy(score(minus, e_l), gold)).item() / (2 * eps)
            analytic = grad[i, j].item()
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12))
    elapsed = time.perf_counter() - start
    check(2, worst <= 1e-4 and elapsed < 60,
          f"max relative gradient error {worst:.2e} over 50 coordinates, {elapsed:.1f}s")


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_sampler_distributions():
    start = time.perf_counter()
    pool = tuple(f"tag{i}" for i in range(5))
    record = KBEntityRecord("Q", pool, (), "a description")
    cfg = SamplingConfig(SamplingMode.SAMPLED, tag_separator="|")
    rng = np.random.default_rng(0)
    n_draws = 100_000
    description, tag_counts = 0, Counter()
    for _ in range(n_draws):
        out = sample_type_verbalization(record, cfg, rng)
        if out == record.description:
            description += 1
        else:
            tag_counts[len(out.split("|"))] += 1
    freq = description / n_draws
    # truncated geometric(0.5) on {1..5}: the tail mass collapses onto 5
    probs = np.array([0.5 ** n for n in range(1, 5)] + [0.5 ** 4])
    observed = np.array([tag_counts[n] for n in range(1, 6)])
    chi2 = stats.chisquare(observed, probs * observed.sum())
    draws = [sample_tag_count(rng, 0.5) for _ in range(n_draws)]
    mean = float(np.mean(draws))
    elapsed = time.perf_counter() - start
    ok = abs(freq - 0.5) <= 0.02 and chi2.pvalue > 0.01 and abs(mean - 2.0) <= 0.05 and elapsed < 60
    check(3, ok, f"description share {freq:.4f}, chi2 p={chi2.pvalue:.3f}, "
                 f"untruncated mean {mean:.4f}, {elapsed:.1f}s")


# -- 4 ----------------------------------------------------------------------

def _exact_feasible(corpus, labels, k):
    rows = [Counter(sp.type_id for sp in s.spans if sp.type_id in labels) for s in corpus.sentences]
    rows = [r for r in rows if r]
    for size in range(1, len(rows) + 1):
        for combo in itertools.combinations(rows, size):
            total = Counter()
            for r in combo:
                total.update(r)
            if all(total[t] == k for t in labels):
                return True
    return False


def test_criterion_4_support_sets():
    start = time.perf_counter()
    rng = random.Random(4)
    feasible = {1: 0, 2: 0, 3: 0}
    exact_fail, bound_fail, infeasible = [], [], 0
    while min(feasible.values()) < 100:
        n_types = rng.randint(2, 4)
        types = [f"t{i}" for i in range(n_types)]
        corpus = random_corpus(rng, rng.randint(2, 12), types, max_entities=rng.randint(1, 4))
        totals = corpus.type_counts()
        for k in (1, 2, 3):
            if feasible[k] >= 100 or any(totals[t] < k for t in types):
                continue
            seed = rng.randrange(10**6)
            support = sample_support_set(corpus, k, seed, types)
            if _exact_feasible(corpus, types, k):
                feasible[k] += 1
                if any(v != k for v in support.label_counts.values()):
                    exact_fail.append((k, seed, dict(support.label_counts)))
            else:
                infeasible += 1
                bound = max(len(s.spans) for s in corpus.sentences) - 1
                if support.max_overshoot > bound:
                    bound_fail.append((k, support.max_overshoot, bound))
    elapsed = time.perf_counter() - start
    check(4, not exact_fail and not bound_fail and elapsed < 120,
          f"{sum(feasible.values())} feasible instances, {len(exact_fail)} not exact; "
          f"{infeasible} infeasible instances, {len(bound_fail)} above the overshoot bound "
          f"{bound_fail[:3]}; {elapsed:.1f}s")


# -- 5 ----------------------------------------------------------------------

COARSE = {f"{c}-{i}": c for c in ("per", "loc", "org", "evt", "art") for i in range(3)}


def test_criterion_5_split_disjointness():
    start = time.perf_counter()
    rng = random.Random(5)
    problems = []
    for trial in range(50):
        types = list(COARSE)
        train = random_corpus(rng, 40, types, max_entities=3)
        test = random_corpus(rng, 10, types, max_entities=3)
        for mode in SplitMode:
            spec = SplitSpec(mode, seed=trial, n_lit=7, n_fs=7, coarse_map=COARSE)
            split = split_labels(train, spec, test)
            lit, fs = set(split.l_lit), set(split.l_fs)
            leaks = sum(sp.type_id in fs for s in split.d_lit.sentences for sp in s.spans) \
                + sum(sp.type_id in lit for c in (split.d_fs, split.d_fs_test)
                      for s in c.sentences for sp in s.spans)
            if leaks or lit & fs:
                problems.append((trial, mode.value, "leak"))
            if mode is SplitMode.INTRA and {COARSE[t] for t in lit} & {COARSE[t] for t in fs}:
                problems.append((trial, mode.value, "impure"))
            if mode is SplitMode.INTER:
                for coarse in set(COARSE.values()):
                    a = sum(COARSE[t] == coarse for t in lit)
                    b = sum(COARSE[t] == coarse for t in fs)
                    if not (a and b and abs(a - b) <= 1):
                        problems.append((trial, mode.value, coarse))
    elapsed = time.perf_counter() - start
    check(5, not problems and elapsed < 60,
          f"50 corpora x {len(SplitMode)} modes, {len(problems)} violations {problems[:3]}, {elapsed:.1f}s")


# -- 6 ----------------------------------------------------------------------

def _brute_force(gold, pred):
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        matched = [False] * len(g)
        for sp in p:
            hit = next((i for i, gs in enumerate(g) if not matched[i] and gs == sp), None)
            if hit is None:
                fp += 1
            else:
                matched[hit] = True
                tp += 1
        fn += matched.count(False)
    return tp, fp, fn


def test_criterion_6_micro_f1():
    start = time.perf_counter()
    rng = random.Random(6)

    def spans():
        out = set()
        for _ in range(rng.randint(0, 5)):
            s = rng.randint(0, 8)
            out.add(EntitySpan(s, s + rng.randint(1, 3), rng.choice("ABC")))
        return list(out)

    mismatches = 0
    for _ in range(200):
        gold = [spans() for _ in range(rng.randint(1, 4))]
        pred = [spans() for _ in gold]
        c = micro_f1(gold, pred)
        tp, fp, fn = _brute_force(gold, pred)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        mismatches += (c.tp, c.fp, c.fn) != (tp, fp, fn) or c.f1 != f
    hand = micro_f1([[EntitySpan(0, 1, "A")]], [[EntitySpan(0, 1, "A"), EntitySpan(2, 3, "B")]])
    hand_ok = hand.precision == 0.5 and hand.recall == 1.0 and math.isclose(hand.f1, 2 / 3)
    elapsed = time.perf_counter() - start
    check(6, mismatches == 0 and hand_ok and elapsed < 10,
          f"{mismatches}/200 disagreements, hand case P/R/F1 = {hand.precision}/{hand.recall}/"
          f"{hand.f1:.4f}, {elapsed:.2f}s")


# -- 7 and 8 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_grid(tmp_path_factory):
    from litset.cli import run_grid
    from litset.config import toy_grid_config

    runs = []
    for attempt in range(2):
        out = tmp_path_factory.mktemp(f"toy{attempt}")
        start = time.perf_counter()
        cells = run_grid(toy_grid_config(str(out)), out)
        runs.append((cells, time.perf_counter() - start))
    return runs


def test_criterion_7_toy_grid(toy_grid):
    cells, elapsed = toy_grid[0]
    finite = all(math.isfinite(r.f1) for c in cells for r in c.results if not r.skipped)
    complete = len(cells) == 6 and all(set(c.mean_f1) == {1, 5} for c in cells)
    long30 = next(c for c in cells if c.n_labels == 30 and c.scheme == "long")
    drops = {seed: 1 - losses[2] / losses[0] for seed, losses in long30.lit_epoch_losses.items()}
    ok = complete and finite and elapsed < 1800 and all(d >= 0.5 for d in drops.values())
    summary = ", ".join(f"{c.n_labels}/{c.scheme}: " + "/".join(f"{100 * c.mean_f1[k]:.1f}"
                                                                for k in sorted(c.mean_f1))
                        for c in cells)
    check(7, ok, f"{len(cells)} cells in {elapsed:.0f}s, LONG/30 epoch1->3 loss drop "
                 f"{ {s: round(d, 3) for s, d in drops.items()} }; F1 (k=1/k=5) {summary}")


def test_criterion_8_determinism(toy_grid):
    (first, _), (second, _) = toy_grid
    a = [r.to_record() for c in first for r in c.results]
    b = [r.to_record() for c in second for r in c.results]
    losses_equal = [c.lit_epoch_losses for c in first] == [c.lit_epoch_losses for c in second]
    check(8, a == b and losses_equal,
          f"{len(a)} RunResults compared, identical={a == b}, LIT losses identical={losses_equal}")


# -- 9 ----------------------------------------------------------------------

def test_criterion_9_builder_fidelity():
    kb = load_kb_records(FIXTURE)
    cfg = SamplingConfig(SamplingMode.DESCRIPTION_ONLY)
    hospital = sample_type_verbalization(filter_meta_types(kb["Q100"]), cfg, np.random.default_rng(0))
    planted = filter_meta_types(kb["Q103"])
    label_cfg = SamplingConfig(SamplingMode.LABELS_ONLY)
    draws = {sample_type_verbalization(planted, label_cfg, np.random.default_rng(s)) for s in range(50)}
    ok = len(kb) == 20 and hospital == "hospital in Baltimore, Maryland" \
        and "Wikimedia disambiguation page" not in planted.tag_pool and draws == {"river"}
    check(9, ok, f"{len(kb)} records, description {hospital!r}, filtered pool {planted.tag_pool}")


# -- 10 ---------------------------------------------------------------------

@pytest.mark.skip(reason="criterion 10 needs a GPU and the full corpora")
def test_criterion_10_gpu_trend():
    pass


def test_criterion_10_recorded():
    ACCEPTANCE[10] = ("SKIP", "optional GPU trend check; not run on CPU")
