"""Span-based NER corpus model, column/JSONL readers and writers, masking,
downsampling and corpus statistics.

Corpora are immutable: every operation returns a new :class:`Corpus`.
"""
from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)

O_ID = "O"
DEFAULT_O_VERBALIZATION = "none, not an entity"


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TagScheme(str, Enum):
    BIO = "BIO"
    IO = "IO"


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int
    type_id: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span bounds [{self.start}, {self.end})")
        if not self.type_id or self.type_id == O_ID:
            raise ValueError(f"invalid span type {self.type_id!r}")

    def overlaps(self, other: EntitySpan) -> bool:
        return self.start < other.end and other.start < self.end

    def __len__(self) -> int:
        return self.end - self.start


def resolve_overlaps(spans: Iterable[EntitySpan]) -> tuple[EntitySpan, ...]:
    """Drop overlapping spans, keeping the longest first and then the leftmost."""
    kept: list[EntitySpan] = []
    for span in sorted(spans, key=lambda s: (-(s.end - s.start), s.start, s.type_id)):
        if not any(span.overlaps(k) for k in kept):
            kept.append(span)
    return tuple(sorted(kept))


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    spans: tuple[EntitySpan, ...] = ()
    # where the sentence came from, e.g. "fs-test"; used to police data leakage
    origin: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "spans", tuple(sorted(self.spans)))
        if not self.tokens:
            raise ValueError("sentence has no tokens")
        n = len(self.tokens)
        prev = None
        for span in self.spans:
            if span.end > n:
                raise ValueError(f"span {span} exceeds sentence length {n}")
            if prev is not None and prev.overlaps(span):
                raise ValueError(f"overlapping spans {prev} and {span}")
            prev = span

    def __len__(self) -> int:
        return len(self.tokens)

    def with_spans(self, spans: Iterable[EntitySpan]) -> Sentence:
        return replace(self, spans=tuple(spans))

    def tags(self, scheme: TagScheme = TagScheme.BIO) -> list[str]:
        tags = [O_ID] * len(self.tokens)
        for span in self.spans:
            for i in range(span.start, span.end):
                if scheme is TagScheme.BIO and i == span.start:
                    tags[i] = f"B-{span.type_id}"
                else:
                    tags[i] = f"I-{span.type_id}"
        return tags

    def type_ids(self) -> set[str]:
        return {s.type_id for s in self.spans}


class TypeInventory(Mapping[str, str]):
    """Ordered ``type_id -> verbalization`` map with O pinned at index 0."""

    def __init__(self, entries: Iterable[tuple[str, str]] | Mapping[str, str] = (),
                 o_verbalization: str = DEFAULT_O_VERBALIZATION):
        if isinstance(entries, Mapping):
            entries = entries.items()
        items: dict[str, str] = {O_ID: o_verbalization}
        for type_id, verbalization in entries:
            if type_id == O_ID:
                items[O_ID] = verbalization
                continue
            if type_id in items:
                raise ValueError(f"duplicate type id {type_id!r}")
            items[type_id] = verbalization
        for type_id, verbalization in items.items():
            if not type_id:
                raise ValueError("empty type id")
            if not isinstance(verbalization, str) or not verbalization.strip():
                raise ValueError(f"empty verbalization for {type_id!r}")
        self._items = items
        self._index = {t: i for i, t in enumerate(items)}

    @classmethod
    def from_ids(cls, type_ids: Iterable[str], o_verbalization: str = DEFAULT_O_VERBALIZATION):
        """Inventory whose verbalizations are the type ids themselves."""
        return cls(((t, t) for t in type_ids), o_verbalization=o_verbalization)

    def __getitem__(self, type_id: str) -> str:
        return self._items[type_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TypeInventory):
            return NotImplemented
        return list(self._items.items()) == list(other._items.items())

    def __hash__(self):
        return hash(tuple(self._items.items()))

    def __repr__(self) -> str:
        return f"TypeInventory({list(self._items.items())!r})"

    @property
    def o_verbalization(self) -> str:
        return self._items[O_ID]

    @property
    def entity_types(self) -> list[str]:
        return [t for t in self._items if t != O_ID]

    def index(self, type_id: str) -> int:
        return self._index[type_id]

    def restrict(self, keep: Iterable[str]) -> TypeInventory:
        keep = set(keep)
        return TypeInventory(
            ((t, v) for t, v in self._items.items() if t in keep and t != O_ID),
            o_verbalization=self.o_verbalization,
        )

    def to_json(self) -> dict:
        return {"o_verbalization": self.o_verbalization,
                "types": [[t, v] for t, v in self._items.items() if t != O_ID]}

    @classmethod
    def from_json(cls, payload: Mapping) -> TypeInventory:
        return cls(((t, v) for t, v in payload["types"]),
                   o_verbalization=payload.get("o_verbalization", DEFAULT_O_VERBALIZATION))


@dataclass(frozen=True)
class CorpusStats:
    distinct_types: int
    mention_count: int
    sentence_count: int
    mean_label_length: float
    stddev_label_length: float


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...]
    inventory: TypeInventory = field(default_factory=TypeInventory)
    language: str = "en"
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        for i, sentence in enumerate(self.sentences):
            for span in sentence.spans:
                if span.type_id not in self.inventory:
                    raise ValueError(f"sentence {i}: type {span.type_id!r} not in inventory")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def mention_count(self) -> int:
        return sum(len(s.spans) for s in self.sentences)

    def type_counts(self) -> Counter:
        """Mention count per type id; types without mentions are absent."""
        return Counter(span.type_id for s in self.sentences for span in s.spans)

    def replace(self, **changes) -> Corpus:
        return replace(self, **changes)


def corpus_from_sentences(sentences: Sequence[Sentence], **kwargs) -> Corpus:
    """Build a corpus whose inventory lists observed types in first-seen order."""
    seen: dict[str, None] = {}
    for sentence in sentences:
        for span in sentence.spans:
            seen.setdefault(span.type_id)
    return Corpus(tuple(sentences), TypeInventory.from_ids(seen), **kwargs)


# ---------------------------------------------------------------------------
# column format


def _split_tag(tag: str) -> tuple[str, str | None]:
    """Return (prefix, type) where prefix is 'O', 'B' or 'I'."""
    if tag == O_ID:
        return O_ID, None
    if tag.startswith(("B-", "I-")) and len(tag) > 2:
        return tag[0], tag[2:]
    # bare type name, as in IO-style corpora such as FewNERD
    return "I", tag


def tags_to_spans(tags: Sequence[str], scheme: TagScheme = TagScheme.BIO,
                  strict: bool = False, line: int | None = None) -> list[EntitySpan]:
    """Reconstruct spans from a tag sequence.

    Under BIO an ``I-`` tag that does not continue a span of the same type is
    either repaired to ``B-`` (default, logged) or rejected when ``strict``.
    """
    spans: list[EntitySpan] = []
    start, current = None, None
    for i, tag in enumerate(tags):
        prefix, type_id = _split_tag(tag)
        begins = False
        if prefix == O_ID:
            pass
        elif scheme is TagScheme.IO:
            begins = type_id != current
        elif prefix == "B":
            begins = True
        elif type_id != current:
            if strict:
                raise CorpusFormatError(f"illegal transition to {tag!r} at token {i}", line)
            log.warning("repairing %r at token %d to B-%s", tag, i, type_id)
            begins = True
        if current is not None and (prefix == O_ID or begins):
            spans.append(EntitySpan(start, i, current))
            start, current = None, None
        if begins:
            start, current = i, type_id
    if current is not None:
        spans.append(EntitySpan(start, len(tags), current))
    return spans


def read_column_corpus(path: str | Path, scheme: TagScheme | str = TagScheme.BIO,
                       strict: bool = False, language: str = "en") -> Corpus:
    """Read a two-column ``token tag`` file; blank lines separate sentences."""
    scheme = TagScheme(scheme)
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    first_line = 0

    def flush():
        if tokens:
            spans = tags_to_spans(tags, scheme, strict=strict, line=first_line)
            sentences.append(Sentence(tuple(tokens), tuple(spans)))
        tokens.clear()
        tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CorpusFormatError(f"expected 2 columns, got {len(parts)}", lineno)
            if not tokens:
                first_line = lineno
            tokens.append(parts[0])
            tags.append(parts[1])
    flush()
    return corpus_from_sentences(sentences, language=language, provenance=str(path))


def write_column_corpus(corpus: Corpus, path: str | Path,
                        scheme: TagScheme | str = TagScheme.BIO) -> None:
    scheme = TagScheme(scheme)
    for type_id in corpus.inventory.entity_types:
        if any(ch.isspace() for ch in type_id):
            raise ValueError(f"type id {type_id!r} contains whitespace; use the JSONL format")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sentence in corpus.sentences:
            for token, tag in zip(sentence.tokens, sentence.tags(scheme)):
                fh.write(f"{token} {tag}\n")
            fh.write("\n")


# ---------------------------------------------------------------------------
# JSONL format: one {"tokens": [...], "spans": [{"start", "end", "type"}]} per line


def sentence_to_json(sentence: Sentence) -> dict:
    payload = {"tokens": list(sentence.tokens),
               "spans": [{"start": s.start, "end": s.end, "type": s.type_id}
                         for s in sentence.spans]}
    if sentence.origin:
        payload["origin"] = sentence.origin
    return payload


def sentence_from_json(payload: Mapping, repair_overlaps: bool = False) -> Sentence:
    spans = [EntitySpan(int(s["start"]), int(s["end"]), s["type"])
             for s in payload.get("spans", ())]
    if repair_overlaps:
        repaired = resolve_overlaps(spans)
        if len(repaired) != len(spans):
            log.warning("dropped %d overlapping spans", len(spans) - len(repaired))
        spans = list(repaired)
    return Sentence(tuple(payload["tokens"]), tuple(spans), payload.get("origin", ""))


def write_jsonl_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sentence in corpus.sentences:
            fh.write(json.dumps(sentence_to_json(sentence), ensure_ascii=False) + "\n")


def read_jsonl_corpus(path: str | Path, inventory: TypeInventory | None = None,
                      repair_overlaps: bool = False, language: str = "en") -> Corpus:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sentences.append(sentence_from_json(json.loads(line), repair_overlaps))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(str(exc), lineno) from exc
    if inventory is None:
        return corpus_from_sentences(sentences, language=language, provenance=str(path))
    return Corpus(tuple(sentences), inventory, language=language, provenance=str(path))


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write ``sentences.jsonl`` plus ``inventory.json`` (lossless)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl_corpus(corpus, directory / "sentences.jsonl")
    meta = {"inventory": corpus.inventory.to_json(), "language": corpus.language,
            "provenance": corpus.provenance}
    (directory / "inventory.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False),
                                              encoding="utf-8")
    return directory


def load_corpus(path: str | Path, scheme: TagScheme | str = TagScheme.BIO) -> Corpus:
    """Load a corpus directory written by :func:`save_corpus`, a JSONL file or a column file."""
    path = Path(path)
    if path.is_dir():
        meta = json.loads((path / "inventory.json").read_text(encoding="utf-8"))
        corpus = read_jsonl_corpus(path / "sentences.jsonl",
                                   TypeInventory.from_json(meta["inventory"]),
                                   language=meta.get("language", "en"))
        return corpus.replace(provenance=meta.get("provenance", str(path)))
    if path.suffix == ".jsonl":
        return read_jsonl_corpus(path)
    return read_column_corpus(path, scheme)


# ---------------------------------------------------------------------------
# transformations


def mask_types(corpus: Corpus, keep: Iterable[str]) -> Corpus:
    """Replace every span whose type is not in ``keep`` by O."""
    keep = set(keep) - {O_ID}
    unknown = keep - set(corpus.inventory)
    if unknown:
        raise ValueError(f"unknown type ids: {sorted(unknown)}")
    sentences = tuple(
        s if all(sp.type_id in keep for sp in s.spans)
        else s.with_spans(sp for sp in s.spans if sp.type_id in keep)
        for s in corpus.sentences
    )
    return corpus.replace(sentences=sentences, inventory=corpus.inventory.restrict(keep))


def downsample_to_mention_count(corpus: Corpus, target: int, seed: int) -> Corpus:
    """Select whole sentences in seeded random order until ``target`` mentions are reached.

    Selected sentences keep their original relative order.
    """
    total = corpus.mention_count
    if target < 0 or target > total:
        raise ValueError(f"target {target} outside [0, {total}]")
    order = list(range(len(corpus.sentences)))
    random.Random(seed).shuffle(order)
    chosen, count = [], 0
    for idx in order:
        if count >= target:
            break
        chosen.append(idx)
        count += len(corpus.sentences[idx].spans)
    chosen.sort()
    return corpus.replace(sentences=tuple(corpus.sentences[i] for i in chosen))


def compute_stats(corpus: Corpus) -> CorpusStats:
    lengths = [len(corpus.inventory[t]) for t in corpus.inventory.entity_types]
    if lengths:
        mean = sum(lengths) / len(lengths)
        std = math.sqrt(sum((x - mean) ** 2 for x in lengths) / len(lengths))
    else:
        mean = std = 0.0
    return CorpusStats(
        distinct_types=len(lengths),
        mention_count=corpus.mention_count,
        sentence_count=len(corpus.sentences),
        mean_label_length=mean,
        stddev_label_length=std,
    )
