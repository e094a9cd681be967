"""Few-shot evaluation protocol: label splits, O-masking, overlap removal,
label subsetting, k-shot support sets and label verbalization schemes."""
from __future__ import annotations

import json
import math
import random
import string
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .corpus import O_ID, Corpus, Sentence, TypeInventory, downsample_to_mention_count, mask_types


class SplitMode(str, Enum):
    FREQUENCY = "frequency"
    INTRA = "intra"
    INTER = "inter"
    RANDOM_HALF = "random_half"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode
    seed: int = 0
    n_lit: int | None = None
    n_fs: int | None = None
    # fine type id -> coarse class, required for INTRA / INTER
    coarse_map: Mapping[str, str] = field(default_factory=dict)
    # count frequencies on the training partition only (default) or train + test
    frequency_on_test: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        if self.mode is SplitMode.FREQUENCY and (self.n_lit is None or self.n_fs is None):
            raise ValueError("FREQUENCY split needs n_lit and n_fs")

    def to_json(self) -> dict:
        return {"mode": self.mode.value, "seed": self.seed, "n_lit": self.n_lit,
                "n_fs": self.n_fs, "coarse_map": dict(self.coarse_map),
                "frequency_on_test": self.frequency_on_test}

    @classmethod
    def from_json(cls, payload: Mapping) -> SplitSpec:
        return cls(**payload)


@dataclass(frozen=True)
class LabelSplit:
    d_lit: Corpus
    d_fs: Corpus
    l_lit: tuple[str, ...]
    l_fs: tuple[str, ...]
    # test partition masked to l_fs, when a test corpus was supplied
    d_fs_test: Corpus | None = None


def _bipartition(items: Sequence[str], rng: random.Random, extra_to_lit: bool = True):
    items = sorted(items)
    rng.shuffle(items)
    cut = math.ceil(len(items) / 2) if extra_to_lit else len(items) // 2
    return items[:cut], items[cut:]


def partition_labels(labels: Sequence[str], spec: SplitSpec,
                     counts: Mapping[str, int] | None = None) -> tuple[list[str], list[str]]:
    """Return (lit labels, few-shot labels) for ``labels`` under ``spec``."""
    rng = random.Random(spec.seed)
    labels = list(labels)
    if spec.mode is SplitMode.FREQUENCY:
        if spec.n_lit + spec.n_fs > len(labels):
            raise ValueError(f"n_lit + n_fs = {spec.n_lit + spec.n_fs} exceeds {len(labels)} labels")
        counts = counts or {}
        ranked = sorted(labels, key=lambda t: (-counts.get(t, 0), t))
        return ranked[:spec.n_lit], ranked[len(ranked) - spec.n_fs:]
    if spec.mode is SplitMode.RANDOM_HALF:
        return _bipartition(labels, rng)

    missing = [t for t in labels if t not in spec.coarse_map]
    if missing:
        raise ValueError(f"coarse_map lacks fine labels: {sorted(missing)}")
    by_coarse: dict[str, list[str]] = {}
    for t in labels:
        by_coarse.setdefault(spec.coarse_map[t], []).append(t)
    if spec.mode is SplitMode.INTRA:
        lit_coarse, _ = _bipartition(list(by_coarse), rng)
        lit_coarse = set(lit_coarse)
        lit = [t for t in labels if spec.coarse_map[t] in lit_coarse]
        fs = [t for t in labels if spec.coarse_map[t] not in lit_coarse]
        return lit, fs
    # INTER: halve every coarse class; odd leftovers alternate sides to keep totals balanced
    lit, fs = [], []
    extra_to_lit = True
    for coarse in sorted(by_coarse):
        members = by_coarse[coarse]
        a, b = _bipartition(members, rng, extra_to_lit)
        if len(members) % 2:
            extra_to_lit = not extra_to_lit
        lit.extend(a)
        fs.extend(b)
    return lit, fs


def split_labels(corpus: Corpus, spec: SplitSpec, test: Corpus | None = None) -> LabelSplit:
    """Split the label set and mask each phase's corpus to its own labels.

    ``corpus`` is the training partition; both returned corpora are masked views
    of it. When ``test`` is given, its view masked to the few-shot labels is
    returned as ``d_fs_test``.
    """
    labels = list(corpus.inventory.entity_types)
    if test is not None:
        labels += [t for t in test.inventory.entity_types if t not in corpus.inventory]
    counts = corpus.type_counts()
    if spec.frequency_on_test and test is not None:
        counts = counts + test.type_counts()
    l_lit, l_fs = partition_labels(labels, spec, counts)
    assert not set(l_lit) & set(l_fs)

    def masked(c: Corpus, keep):
        return mask_types(c, [t for t in keep if t in c.inventory])

    d_fs_test = masked(test, l_fs) if test is not None else None
    return LabelSplit(masked(corpus, l_lit), masked(corpus, l_fs), tuple(l_lit), tuple(l_fs),
                      d_fs_test)


def normalize_verbalization(text: str) -> str:
    return " ".join(text.casefold().split())


def remove_overlap(litset: Corpus, forbidden: Iterable[str]) -> Corpus:
    """Mask types whose verbalization equals a forbidden one (case/whitespace-insensitive)."""
    forbidden = {normalize_verbalization(f) for f in forbidden}
    if not forbidden:
        return litset
    keep = [t for t in litset.inventory.entity_types
            if normalize_verbalization(litset.inventory[t]) not in forbidden]
    return mask_types(litset, keep)


def subset_lit_labels(d_lit: Corpus, n_labels: int, annotation_budget: int, seed: int) -> Corpus:
    """Keep ``n_labels`` seeded-random types, then downsample to the annotation budget."""
    types = d_lit.inventory.entity_types
    if not 0 < n_labels <= len(types):
        raise ValueError(f"n_labels must be in [1, {len(types)}]")
    rng = random.Random(seed)
    keep = sorted(rng.sample(sorted(types), n_labels), key=d_lit.inventory.index)
    masked = mask_types(d_lit, keep)
    if annotation_budget > masked.mention_count:
        raise ValueError(f"annotation budget {annotation_budget} unreachable with labels "
                         f"{keep}; maximum is {masked.mention_count}")
    return downsample_to_mention_count(masked, annotation_budget, seed)


# ---------------------------------------------------------------------------
# support sets


class InfeasibleSupportError(ValueError):
    pass


@dataclass(frozen=True)
class SupportSet:
    sentences: tuple[Sentence, ...]
    k: int
    label_counts: Mapping[str, int]

    @property
    def overshoot(self) -> dict[str, int]:
        return {t: c - self.k for t, c in self.label_counts.items() if c > self.k}

    @property
    def max_overshoot(self) -> int:
        return max(self.overshoot.values(), default=0)

    def as_corpus(self, inventory: TypeInventory) -> Corpus:
        return Corpus(self.sentences, inventory, provenance=f"support k={self.k}")


def _exact_search(order, cands, sent_counts, k, counts, chosen, next_pos, budget):
    """Depth-first search for a selection with every label at exactly k.

    Labels are filled in ``order``; candidates for a label are tried in their
    seeded order, so the first leaf explored is the plain greedy choice.
    """
    target = next((t for t in order if counts[t] < k), None)
    if target is None:
        return list(chosen)
    # sentences picked for one label are taken in increasing position to avoid permutations
    start = next_pos.get(target, 0)
    for pos in range(start, len(cands[target])):
        budget[0] -= 1
        if budget[0] <= 0:
            return None
        idx = cands[target][pos]
        if idx in chosen:
            continue
        add = sent_counts[idx]
        if any(counts[t] + c > k for t, c in add.items()):
            continue
        for t, c in add.items():
            counts[t] += c
        chosen.append(idx)
        next_pos[target] = pos + 1
        found = _exact_search(order, cands, sent_counts, k, counts, chosen, next_pos, budget)
        if found is not None:
            return found
        next_pos[target] = start
        chosen.pop()
        for t, c in add.items():
            counts[t] -= c
    return None


def _greedy_with_overshoot(order, cands, sent_counts, k):
    counts = Counter({t: 0 for t in order})
    chosen: list[int] = []
    for label in order:
        for idx in cands[label]:
            if counts[label] >= k:
                break
            if idx in chosen:
                continue
            add = sent_counts[idx]
            if all(counts[t] + c <= k for t, c in add.items()):
                chosen.append(idx)
                counts.update(add)
        while counts[label] < k:
            # admit the sentence whose addition keeps the worst overshoot smallest
            best = min(
                (i for i in cands[label] if i not in chosen),
                key=lambda i: (max(counts[t] + c - k for t, c in sent_counts[i].items()),
                               sum(max(0, counts[t] + c - k) for t, c in sent_counts[i].items())),
            )
            chosen.append(best)
            counts.update(sent_counts[best])
    return chosen


def sample_support_set(d_fs: Corpus, k: int, seed: int, labels: Sequence[str] | None = None,
                       search_budget: int = 200_000) -> SupportSet:
    """Sample sentences so every label appears exactly ``k`` times where possible.

    Labels are handled rarest first; candidate sentences are visited in seeded
    random order and rejected when they would push any label above ``k``. A
    bounded backtracking search recovers from greedy dead ends; if no exact
    selection is found the greedy pass admits the sentences with the smallest
    overshoot, which is then visible in ``label_counts``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    labels = list(labels) if labels is not None else d_fs.inventory.entity_types
    if k == 0:
        return SupportSet((), 0, {t: 0 for t in labels})
    label_set = set(labels)
    totals = d_fs.type_counts()
    short = [t for t in labels if totals.get(t, 0) < k]
    if short:
        raise InfeasibleSupportError(
            f"labels with fewer than {k} mentions: "
            + ", ".join(f"{t} ({totals.get(t, 0)})" for t in short))

    rng = random.Random(seed)
    sent_counts = {
        i: Counter(sp.type_id for sp in s.spans if sp.type_id in label_set)
        for i, s in enumerate(d_fs.sentences)
    }
    sent_counts = {i: c for i, c in sent_counts.items() if c}
    order = sorted(labels, key=lambda t: (totals[t], t))
    cands = {}
    for t in order:
        pool = [i for i, c in sent_counts.items() if t in c]
        rng.shuffle(pool)
        cands[t] = pool

    counts = Counter({t: 0 for t in order})
    chosen = _exact_search(order, cands, sent_counts, k, counts, [], {}, [search_budget])
    if chosen is None:
        chosen = _greedy_with_overshoot(order, cands, sent_counts, k)

    final = Counter({t: 0 for t in labels})
    for idx in chosen:
        final.update(sent_counts[idx])
    return SupportSet(tuple(d_fs.sentences[i] for i in sorted(chosen)), k,
                      {t: final[t] for t in labels})


# ---------------------------------------------------------------------------
# verbalization schemes


class SchemeKind(str, Enum):
    CRYPTIC = "cryptic"
    SHORT = "short"
    LONG = "long"
    IDENTITY = "identity"


@dataclass(frozen=True)
class VerbalizationScheme:
    kind: SchemeKind
    table: Mapping[str, str]
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        object.__setattr__(self, "table", dict(self.table))

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "table": dict(self.table), "seed": self.seed}

    @classmethod
    def from_json(cls, payload: Mapping) -> VerbalizationScheme:
        return cls(payload["kind"], payload["table"], payload.get("seed"))


def cryptic_scheme(type_ids: Iterable[str], seed: int) -> VerbalizationScheme:
    """Unique random two-letter uppercase labels, one per type id."""
    type_ids = list(dict.fromkeys(t for t in type_ids if t != O_ID))
    if len(type_ids) > 26 * 26:
        raise ValueError("too many types for two-letter labels")
    rng = random.Random(seed)
    used: set[str] = set()
    table = {}
    for type_id in type_ids:
        while True:
            code = "".join(rng.choice(string.ascii_uppercase) for _ in range(2))
            if code not in used:
                break
        used.add(code)
        table[type_id] = code
    return VerbalizationScheme(SchemeKind.CRYPTIC, table, seed)


def identity_scheme(inventory: TypeInventory) -> VerbalizationScheme:
    return VerbalizationScheme(SchemeKind.IDENTITY,
                               {t: inventory[t] for t in inventory.entity_types})


def load_packaged_scheme(kind: SchemeKind | str, dataset: str = "fewnerd") -> VerbalizationScheme:
    """Load a verbalization table shipped with the package."""
    kind = SchemeKind(kind)
    payload = json.loads(resources.files("litset.resources")
                         .joinpath("verbalizations.json").read_text(encoding="utf-8"))
    tables = payload["datasets"][dataset]
    return VerbalizationScheme(kind, tables[kind.value])


def apply_verbalization(corpus: Corpus, scheme: VerbalizationScheme) -> Corpus:
    """Swap inventory verbalizations; spans and type ids are untouched.

    An entry for O in the table replaces the O verbalization as well.
    """
    missing = [t for t in corpus.inventory.entity_types if t not in scheme.table]
    if missing:
        raise KeyError(f"verbalization table lacks {sorted(missing)}")
    inventory = TypeInventory(
        ((t, scheme.table[t]) for t in corpus.inventory.entity_types),
        o_verbalization=scheme.table.get(O_ID, corpus.inventory.o_verbalization),
    )
    return corpus.replace(inventory=inventory)

