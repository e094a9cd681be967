"""Turn entity-linking mentions plus knowledge-base type records into an NER
corpus whose entity types are natural-language verbalizations.

Each linked mention is annotated either with the entity's free-text
description or with a random concatenation of its instance-of / subclass-of
labels, the number of labels being geometrically distributed.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, CorpusFormatError, EntitySpan, Sentence, TypeInventory

log = logging.getLogger(__name__)

DEFAULT_DENYLIST = (
    "wikimedia",
    "disambiguation page",
    "list article",
    "template",
    "category",
)


class SamplingMode(str, Enum):
    SAMPLED = "sampled"
    LABELS_ONLY = "labels_only"
    DESCRIPTION_ONLY = "description_only"
    ALL = "all"


@dataclass(frozen=True)
class KBEntityRecord:
    qid: str
    instance_of: tuple[str, ...] = ()
    subclass_of: tuple[str, ...] = ()
    description: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "instance_of", tuple(self.instance_of))
        object.__setattr__(self, "subclass_of", tuple(self.subclass_of))
        if not self.qid:
            raise ValueError("record without qid")

    @property
    def tag_pool(self) -> list[str]:
        """instance-of and subclass-of labels as one deduplicated, ordered pool."""
        return list(dict.fromkeys(t for t in self.instance_of + self.subclass_of if t.strip()))

    @property
    def has_description(self) -> bool:
        return bool(self.description and self.description.strip())

    def is_usable(self) -> bool:
        return bool(self.tag_pool) or self.has_description


@dataclass(frozen=True)
class LinkedMention:
    sentence_index: int
    start: int
    end: int
    qid: str


@dataclass(frozen=True)
class MetaFilter:
    denylist: tuple[str, ...] = DEFAULT_DENYLIST

    def __post_init__(self):
        if not self.denylist:
            raise ValueError("denylist must not be empty")
        object.__setattr__(self, "denylist", tuple(d.lower() for d in self.denylist))

    def is_meta(self, label: str) -> bool:
        low = label.lower()
        return any(d in low for d in self.denylist)


@dataclass(frozen=True)
class SamplingConfig:
    mode: SamplingMode = SamplingMode.SAMPLED
    p_geometric: float = 0.5
    seed: int = 0
    tag_separator: str = ", "
    # sample once per knowledge-base entity instead of once per mention
    per_entity: bool = False
    meta_filter: MetaFilter = field(default_factory=MetaFilter)

    def __post_init__(self):
        object.__setattr__(self, "mode", SamplingMode(self.mode))
        if not 0.0 < self.p_geometric < 1.0:
            raise ValueError("p_geometric must lie in (0, 1)")


def _record_from_json(payload: Mapping) -> KBEntityRecord:
    description = payload.get("description")
    return KBEntityRecord(
        qid=str(payload["qid"]),
        instance_of=tuple(payload.get("instance_of") or ()),
        subclass_of=tuple(payload.get("subclass_of") or ()),
        description=description if description else None,
    )


def load_kb_records(path: str | Path) -> dict[str, KBEntityRecord]:
    """Read knowledge-base records from JSONL; later duplicates replace earlier ones."""
    records: dict[str, KBEntityRecord] = {}
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = _record_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"bad KB record: {exc}", lineno) from exc
            if not record.is_usable():
                log.warning("line %d: record %s has neither labels nor description; rejected",
                            lineno, record.qid)
                rejected += 1
                continue
            if record.qid in records:
                log.info("line %d: duplicate qid %s, keeping the later record", lineno, record.qid)
            records[record.qid] = record
    if rejected:
        log.info("rejected %d unusable KB records", rejected)
    return records


def filter_meta_types(record: KBEntityRecord, meta_filter: MetaFilter = MetaFilter()) -> KBEntityRecord:
    """Drop knowledge-base bookkeeping labels (disambiguation pages, templates, ...)."""
    return replace(
        record,
        instance_of=tuple(t for t in record.instance_of if not meta_filter.is_meta(t)),
        subclass_of=tuple(t for t in record.subclass_of if not meta_filter.is_meta(t)),
    )


def sample_tag_count(rng: np.random.Generator, p: float, max_n: int | None = None) -> int:
    """Geometric draw on {1, 2, ...} with success probability ``p``, capped at ``max_n``."""
    if max_n is not None and max_n < 1:
        raise ValueError("max_n must be >= 1")
    n = int(rng.geometric(p))
    return n if max_n is None else min(n, max_n)


def _sample_tags(record: KBEntityRecord, config: SamplingConfig, rng) -> str:
    pool = record.tag_pool
    n = sample_tag_count(rng, config.p_geometric, len(pool))
    picked = rng.choice(len(pool), size=n, replace=False)
    return config.tag_separator.join(pool[int(i)] for i in picked)


def sample_type_verbalization(record: KBEntityRecord, config: SamplingConfig,
                              rng: np.random.Generator) -> str:
    """Draw one verbalization for ``record`` according to ``config.mode``.

    When the chosen source (description or labels) is empty, the other one is used.
    """
    has_tags = bool(record.tag_pool)
    has_desc = record.has_description
    if not (has_tags or has_desc):
        raise ValueError(f"record {record.qid} has neither labels nor description")
    mode = config.mode

    if mode is SamplingMode.ALL:
        parts = ([record.description] if has_desc else []) + record.tag_pool
        return config.tag_separator.join(parts)
    if mode is SamplingMode.SAMPLED:
        use_description = rng.random() < 0.5
    else:
        use_description = mode is SamplingMode.DESCRIPTION_ONLY
    if use_description and not has_desc:
        use_description = False
    elif not use_description and not has_tags:
        use_description = True
    if use_description:
        return record.description
    return _sample_tags(record, config, rng)


def mention_rng(seed: int, mention: LinkedMention, per_entity: bool = False) -> np.random.Generator:
    """Independent random stream for one mention (or one entity when ``per_entity``)."""
    if per_entity:
        key = [seed, zlib.crc32(mention.qid.encode("utf-8"))]
    else:
        key = [seed, mention.sentence_index, mention.start, mention.end]
    return np.random.default_rng(key)


@dataclass
class AnnotationReport:
    mentions: int = 0
    annotated: int = 0
    unresolved: int = 0
    unusable: int = 0
    invalid: int = 0
    collisions: int = 0


def annotate_corpus(sentences: Sequence[Sentence], mentions: Iterable[LinkedMention],
                    kb: Mapping[str, KBEntityRecord], config: SamplingConfig,
                    report: AnnotationReport | None = None, language: str = "en") -> Corpus:
    """Annotate span-less sentences with sampled verbalizations of their linked entities.

    Identical verbalization strings share a type id, and the inventory is sorted
    by string so the result does not depend on mention processing order.
    """
    report = report if report is not None else AnnotationReport()
    filtered: dict[str, KBEntityRecord] = {}
    per_sentence: dict[int, list[EntitySpan]] = {}

    # earlier mentions win collisions, so process in a canonical order
    ordered = sorted(mentions, key=lambda m: (m.sentence_index, m.start, m.end, m.qid))
    for mention in ordered:
        report.mentions += 1
        record = kb.get(mention.qid)
        if record is None:
            report.unresolved += 1
            continue
        if mention.qid not in filtered:
            filtered[mention.qid] = filter_meta_types(record, config.meta_filter)
        record = filtered[mention.qid]
        if not record.is_usable():
            report.unusable += 1
            continue
        if not (0 <= mention.sentence_index < len(sentences)) or \
                not (0 <= mention.start < mention.end <= len(sentences[mention.sentence_index])):
            log.warning("mention %s out of bounds; dropped", mention)
            report.invalid += 1
            continue
        rng = mention_rng(config.seed, mention, config.per_entity)
        span = EntitySpan(mention.start, mention.end,
                          sample_type_verbalization(record, config, rng))
        taken = per_sentence.setdefault(mention.sentence_index, [])
        if any(span.overlaps(other) for other in taken):
            log.info("mention %s collides with an earlier mention; dropped", mention)
            report.collisions += 1
            continue
        taken.append(span)
        report.annotated += 1

    annotated = tuple(
        Sentence(s.tokens, tuple(per_sentence.get(i, ())), s.origin)
        for i, s in enumerate(sentences)
    )
    types = sorted({sp.type_id for spans in per_sentence.values() for sp in spans})
    log.info("annotated %d/%d mentions with %d distinct types (%d unresolved, %d collisions)",
             report.annotated, report.mentions, len(types), report.unresolved, report.collisions)
    return Corpus(annotated, TypeInventory.from_ids(types), language=language,
                  provenance=f"litset mode={config.mode.value} seed={config.seed}")


def load_mentions(path: str | Path) -> list[LinkedMention]:
    mentions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                m = json.loads(line)
                mentions.append(LinkedMention(int(m["sentence_index"]), int(m["start"]),
                                              int(m["end"]), str(m["qid"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"bad mention: {exc}", lineno) from exc
    return mentions


def load_raw_sentences(path: str | Path) -> list[Sentence]:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sentences.append(Sentence(tuple(json.loads(line)["tokens"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"bad sentence: {exc}", lineno) from exc
    return sentences
