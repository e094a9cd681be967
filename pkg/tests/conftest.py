import random

import pytest
from hypothesis import strategies as st

from litset.corpus import Corpus, EntitySpan, Sentence, TypeInventory

TINY = "tiny:layers=2,hidden=32,heads=4,vocab=2048"


@st.composite
def sentences(draw, types=("PER", "LOC", "ORG", "MISC"), max_len=12):
    n = draw(st.integers(1, max_len))
    tokens = tuple(draw(st.lists(st.sampled_from(["a", "b", "Bob", "x1", "ü", "New", "York"]),
                                 min_size=n, max_size=n)))
    spans, pos = [], 0
    while pos < n:
        if draw(st.booleans()):
            end = draw(st.integers(pos + 1, min(n, pos + 3)))
            spans.append(EntitySpan(pos, end, draw(st.sampled_from(types))))
            pos = end + draw(st.integers(0, 2))
        else:
            pos += 1
    return Sentence(tokens, tuple(spans))


@st.composite
def corpora(draw, types=("PER", "LOC", "ORG", "MISC"), max_sentences=8):
    sents = draw(st.lists(sentences(types), min_size=1, max_size=max_sentences))
    return Corpus(tuple(sents), TypeInventory.from_ids(types))


def random_corpus(rng: random.Random, n_sentences: int, types, max_entities: int = 3,
                  length: int = 8) -> Corpus:
    """Sentences of ``length`` one-token slots holding up to ``max_entities`` entities."""
    sents = []
    for _ in range(n_sentences):
        n_ent = rng.randint(0, max_entities)
        slots = sorted(rng.sample(range(length), n_ent))
        spans = tuple(EntitySpan(s, s + 1, rng.choice(types)) for s in slots)
        sents.append(Sentence(tuple(f"w{i}" for i in range(length)), spans))
    return Corpus(tuple(sents), TypeInventory.from_ids(types))


@pytest.fixture
def tiny_id():
    return TINY


# criterion number -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
