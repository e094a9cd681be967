"""Vocabulary-templated synthetic NER data for desk-scale experiments.

Types are organised as ``coarse-fine`` pairs. Every fine type owns a small
pool of pseudo-word entity names sharing a type-specific stem, and sentences
embed 1-2 entities into templates that mention a cue word for the type, so a
tiny encoder can learn the task within a few epochs.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import Corpus, EntitySpan, Sentence, TypeInventory

COARSE = {
    "person": ["athlete", "actor", "politician", "scientist", "artist", "soldier"],
    "location": ["city", "mountain", "river", "island", "park", "country"],
    "organization": ["company", "university", "hospital", "party", "team", "newspaper"],
    "product": ["car", "ship", "weapon", "software", "food", "game"],
    "event": ["war", "festival", "election", "disaster", "tournament", "protest"],
    "art": ["film", "novel", "song", "painting", "album", "play"],
}

_EXAMPLES = {
    "person": "people",
    "location": "places",
    "organization": "organisations",
    "product": "manufactured products",
    "event": "events",
    "art": "creative works",
}

_FILLER = ["the", "a", "new", "old", "local", "famous", "small", "large", "early", "late",
           "report", "story", "week", "today", "later", "again", "near", "with", "about", "from"]

_TEMPLATES = [
    "{c0} {e0} was mentioned in the {f} {f} report",
    "yesterday the {c0} {e0} met {c1} {e1} near the {f} hall",
    "according to the {f} story {e0} is a {c0}",
    "many {f} people know the {c0} {e0}",
    "{e0} , a {f} {c0} , joined {e1} , the {c1}",
    "the {f} week began when the {c0} {e0} arrived",
    "in {f} news {e0} the {c0} and {e1} the {c1} appeared together",
]

_SYLLABLES = ["ka", "lo", "mi", "ru", "te", "vo", "zi", "na", "pe", "so", "du", "fa", "gi", "ho"]


@dataclass(frozen=True)
class SyntheticData:
    train: Corpus
    test: Corpus
    coarse_map: dict[str, str]
    short: dict[str, str]
    long: dict[str, str]


def type_ids() -> list[str]:
    return [f"{c}-{f}" for c, fines in COARSE.items() for f in fines]


def _names(type_id: str, rng: random.Random, n: int) -> list[tuple[str, ...]]:
    stem = type_id.split("-")[1][:3]
    names = set()
    while len(names) < n:
        length = rng.choice([1, 1, 2])
        names.add(tuple(stem + "".join(rng.choice(_SYLLABLES) for _ in range(2))
                        for _ in range(length)))
    return sorted(names)


def _sentence(rng, templates, weights_types, pools) -> Sentence:
    template = rng.choice(templates)
    n_ent = 2 if "{e1}" in template else 1
    chosen = []
    while len(chosen) < n_ent:
        t = rng.choices(weights_types[0], weights=weights_types[1])[0]
        if t not in chosen:
            chosen.append(t)
    tokens: list[str] = []
    spans = []
    for piece in template.split():
        if piece in ("{e0}", "{e1}"):
            t = chosen[int(piece[2])]
            name = rng.choice(pools[t])
            spans.append(EntitySpan(len(tokens), len(tokens) + len(name), t))
            tokens.extend(name)
        elif piece in ("{c0}", "{c1}"):
            tokens.append(chosen[int(piece[2])].split("-")[1])
        elif piece == "{f}":
            tokens.append(rng.choice(_FILLER))
        else:
            tokens.append(piece)
    return Sentence(tuple(tokens), tuple(spans))


def generate(n_mentions: int = 3000, n_test_sentences: int = 300, seed: int = 0,
             names_per_type: int = 12, n_rare: int = 6, rare_weight: float = 0.15) -> SyntheticData:
    """Train partition with at least ``n_mentions`` mentions plus a test partition.

    ``n_rare`` randomly chosen types are sampled ``rare_weight`` times as often
    as the others in training, so a frequency split puts them on the few-shot
    side. The test partition draws all types uniformly.
    """
    rng = random.Random(seed)
    types = type_ids()
    rank = list(types)
    rng.shuffle(rank)
    weights = [rare_weight if i >= len(rank) - n_rare else 0.8 + 0.4 * rng.random()
               for i in range(len(rank))]
    pools = {t: _names(t, rng, names_per_type) for t in types}
    train, count = [], 0
    while count < n_mentions:
        s = _sentence(rng, _TEMPLATES, (rank, weights), pools)
        train.append(s)
        count += len(s.spans)
    test = [_sentence(rng, _TEMPLATES, (rank, [1.0] * len(rank)), pools)
            for _ in range(n_test_sentences)]
    coarse_map = {t: t.split("-")[0] for t in types}
    short = {t: t.split("-")[1] for t in types}
    long = {t: f"{t.split('-')[1]} entity, one of the {_EXAMPLES[t.split('-')[0]]} "
               f"in the {t.split('-')[0]} category" for t in types}
    inventory = TypeInventory.from_ids(types)
    return SyntheticData(Corpus(tuple(train), inventory, provenance=f"synthetic seed={seed}"),
                         Corpus(tuple(test), inventory, provenance=f"synthetic-test seed={seed}"),
                         coarse_map, short, long)
