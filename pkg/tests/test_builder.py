import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from litset.builder import (KBEntityRecord, LinkedMention, MetaFilter, SamplingConfig,
                            SamplingMode, annotate_corpus, filter_meta_types, load_kb_records,
                            mention_rng, sample_tag_count, sample_type_verbalization)
from litset.corpus import CorpusFormatError, Sentence

FIXTURE = Path(__file__).parent / "fixtures" / "kb20.jsonl"
HOSPITAL = KBEntityRecord("Q100", ("teaching hospital", "university hospital"), (),
                          "hospital in Baltimore, Maryland")


class ScriptedRng:
    """Stands in for a numpy Generator with fixed outcomes."""

    def __init__(self, uniform=0.9, n=2, picks=(0, 1)):
        self.uniform, self.n, self.picks = uniform, n, picks

    def random(self):
        return self.uniform

    def geometric(self, p):
        return self.n

    def choice(self, a, size, replace=False):
        return np.array(self.picks[:size])


def test_hospital_description_verbatim():
    cfg = SamplingConfig(mode=SamplingMode.DESCRIPTION_ONLY)
    assert sample_type_verbalization(HOSPITAL, cfg, np.random.default_rng(0)) == \
        "hospital in Baltimore, Maryland"


def test_hospital_two_forced_tags():
    cfg = SamplingConfig(mode=SamplingMode.LABELS_ONLY)
    assert sample_type_verbalization(HOSPITAL, cfg, ScriptedRng()) == \
        "teaching hospital, university hospital"


def test_sampled_mode_branches_on_uniform_draw():
    cfg = SamplingConfig(mode=SamplingMode.SAMPLED)
    assert sample_type_verbalization(HOSPITAL, cfg, ScriptedRng(uniform=0.1)) == HOSPITAL.description
    assert sample_type_verbalization(HOSPITAL, cfg, ScriptedRng(uniform=0.9, n=1, picks=(1,))) == \
        "university hospital"


def test_all_mode_concatenates_everything():
    cfg = SamplingConfig(mode=SamplingMode.ALL)
    assert sample_type_verbalization(HOSPITAL, cfg, None) == \
        "hospital in Baltimore, Maryland, teaching hospital, university hospital"


def test_empty_source_falls_back():
    no_desc = KBEntityRecord("Q1", ("city",))
    no_tags = KBEntityRecord("Q2", (), (), "a place")
    assert sample_type_verbalization(no_desc, SamplingConfig(mode="description_only"),
                                     np.random.default_rng(0)) == "city"
    assert sample_type_verbalization(no_tags, SamplingConfig(mode="labels_only"),
                                     np.random.default_rng(0)) == "a place"
    with pytest.raises(ValueError):
        sample_type_verbalization(KBEntityRecord("Q3"), SamplingConfig(), np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(st.characters(blacklist_characters="\x1f"), min_size=1, max_size=6)
                .filter(str.strip), min_size=1, max_size=6, unique=True),
       st.integers(0, 2**31 - 1))
def test_sampled_tags_are_distinct_members_of_pool(pool, seed):
    rec = KBEntityRecord("Q", tuple(pool))
    cfg = SamplingConfig(mode="labels_only", tag_separator="\x1f")
    out = sample_type_verbalization(rec, cfg, np.random.default_rng(seed)).split("\x1f")
    assert 1 <= len(out) <= len(pool)
    assert len(set(out)) == len(out)
    assert set(out) <= set(pool)


def test_tag_count_truncates_and_validates():
    rng = np.random.default_rng(0)
    assert all(1 <= sample_tag_count(rng, 0.5, 2) <= 2 for _ in range(1000))
    with pytest.raises(ValueError):
        sample_tag_count(rng, 0.5, 0)


def test_meta_filter_drops_denylisted_labels():
    rec = KBEntityRecord("Q", ("Wikimedia disambiguation page", "river"), ("Template:Infobox",))
    assert filter_meta_types(rec).tag_pool == ["river"]
    assert filter_meta_types(rec, MetaFilter(("river",))).tag_pool == \
        ["Wikimedia disambiguation page", "Template:Infobox"]


def test_fixture_loading_and_filtering():
    kb = load_kb_records(FIXTURE)
    assert len(kb) == 20
    assert kb["Q100"].description == "hospital in Baltimore, Maryland"
    filtered = filter_meta_types(kb["Q103"])
    assert "Wikimedia disambiguation page" not in filtered.tag_pool
    assert filtered.tag_pool == ["river"]


def test_kb_duplicates_and_unusable(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in [
        {"qid": "Q1", "instance_of": ["a"]},
        {"qid": "Q2"},
        {"qid": "Q1", "instance_of": ["b"]},
    ]), encoding="utf-8")
    kb = load_kb_records(path)
    assert set(kb) == {"Q1"} and kb["Q1"].tag_pool == ["b"]
    path.write_text('{"qid": "Q1", "instance_of": ["a"]}\n{broken\n', encoding="utf-8")
    with pytest.raises(CorpusFormatError) as err:
        load_kb_records(path)
    assert err.value.line == 2


def _toy_inputs():
    sents = [Sentence(("Johns", "Hopkins", "Hospital", "in", "Paris")),
             Sentence(("Paris", "and", "Paris"))]
    mentions = [LinkedMention(0, 0, 3, "Q100"), LinkedMention(0, 4, 5, "Q102"),
                LinkedMention(1, 0, 1, "Q102"), LinkedMention(1, 2, 3, "Q102"),
                LinkedMention(1, 0, 1, "Q999"), LinkedMention(0, 1, 2, "Q102")]
    return sents, mentions


def test_annotation_is_order_independent_and_reported():
    from litset.builder import AnnotationReport

    kb = load_kb_records(FIXTURE)
    sents, mentions = _toy_inputs()
    cfg = SamplingConfig(seed=5)
    report = AnnotationReport()
    a = annotate_corpus(sents, mentions, kb, cfg, report)
    b = annotate_corpus(sents, list(reversed(mentions)), kb, cfg)
    assert a == b
    assert report.unresolved == 1 and report.collisions == 1
    assert a.mention_count == 4
    assert a.inventory.entity_types == sorted(a.inventory.entity_types)
    for t in a.inventory.entity_types:
        assert a.inventory[t] == t


def test_per_entity_sampling_shares_one_verbalization():
    kb = load_kb_records(FIXTURE)
    sents, mentions = _toy_inputs()
    a = annotate_corpus(sents, mentions, kb, SamplingConfig(seed=1, per_entity=True))
    paris = {sp.type_id for s in a.sentences for sp in s.spans if sp.end - sp.start == 1}
    assert len(paris) == 1


def test_mention_rng_streams_are_keyed():
    m = LinkedMention(3, 1, 2, "Q7")
    assert mention_rng(0, m).random() == mention_rng(0, m).random()
    assert mention_rng(0, m).random() != mention_rng(1, m).random()
    other = LinkedMention(4, 1, 2, "Q7")
    assert mention_rng(0, m, True).random() == mention_rng(0, other, True).random()


def test_branch_frequency_rough():
    cfg = SamplingConfig()
    rng = np.random.default_rng(0)
    hits = Counter(sample_type_verbalization(HOSPITAL, cfg, rng) == HOSPITAL.description
                   for _ in range(4000))
    assert abs(hits[True] / 4000 - 0.5) < 0.04
