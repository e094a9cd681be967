"""Bi-encoder NER model: tokens and label verbalizations are encoded separately
and every token is scored against every label by a dot product.

Training restricts the label space to the labels occurring in the batch (plus
O and optional sampled negatives), so inventories with ~10^6 types stay cheap.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import DEFAULT_O_VERBALIZATION, O_ID, EntitySpan, Sentence, TypeInventory
from .encoders import build_encoder

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    token_encoder_id: str = "bert-base-uncased"
    label_encoder_id: str = "bert-base-uncased"
    max_sequence_length: int = 512
    subword_pooling: str = "first"
    # overrides the inventory's O verbalization when set
    o_verbalization: str | None = None
    # score O with a free learned vector instead of an encoded verbalization
    learned_o: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_sequence_length <= 0:
            raise ValueError("max_sequence_length must be positive")
        if self.subword_pooling != "first":
            raise ValueError("only first-subword pooling is supported")


@dataclass
class BatchLabelSpace:
    local_labels: tuple[str, ...]
    global_to_local: dict[str, int] = field(default_factory=dict)
    embeddings: torch.Tensor | None = None

    def __post_init__(self):
        self.local_labels = tuple(self.local_labels)
        if not self.local_labels or self.local_labels[0] != O_ID:
            raise ValueError("O must be the first local label")
        if len(set(self.local_labels)) != len(self.local_labels):
            raise ValueError("duplicate local labels")
        self.global_to_local = {t: i for i, t in enumerate(self.local_labels)}

    def __len__(self) -> int:
        return len(self.local_labels)

    @classmethod
    def from_types(cls, types: Iterable[str]) -> BatchLabelSpace:
        return cls((O_ID,) + tuple(t for t in dict.fromkeys(types) if t != O_ID))


def build_batch_label_space(batch: Sequence[Sentence], inventory: TypeInventory,
                            negatives_m: int = 0, rng: random.Random | None = None) -> BatchLabelSpace:
    """O plus the gold types of ``batch`` in inventory order, padded with uniformly
    sampled negatives until ``negatives_m`` entity labels are present."""
    if negatives_m < 0:
        raise ValueError("negatives_m must be >= 0")
    present = {sp.type_id for s in batch for sp in s.spans}
    local = [t for t in inventory.entity_types if t in present]
    if negatives_m > len(local):
        pool = [t for t in inventory.entity_types if t not in present]
        rng = rng or random.Random(0)
        local += rng.sample(pool, min(negatives_m - len(local), len(pool)))
    return BatchLabelSpace.from_types(local)


def score(e_t: torch.Tensor, e_l: torch.Tensor) -> torch.Tensor:
    """Token-label logits ``e_t @ e_l.T`` (N x |labels|)."""
    if e_t.shape[-1] != e_l.shape[-1]:
        raise ValueError(f"hidden size mismatch: tokens {e_t.shape[-1]} vs labels {e_l.shape[-1]}")
    return e_t @ e_l.T


def predict(logits: torch.Tensor) -> torch.Tensor:
    # argmax returns the first maximum, so ties go to the lowest index (O)
    return logits.argmax(dim=-1)


def in_batch_cross_entropy(logits: torch.Tensor, gold: torch.Tensor,
                           ignore_index: int = -100) -> torch.Tensor:
    """Mean token cross-entropy over the local label space."""
    valid = gold[gold != ignore_index]
    if valid.numel() and (valid.min() < 0 or valid.max() >= logits.shape[-1]):
        raise ValueError(f"gold ids outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, gold, ignore_index=ignore_index)


def decode_spans(labels: Sequence[str]) -> list[EntitySpan]:
    """IO decoding: maximal runs of one non-O label become spans."""
    spans = []
    start = None
    for i, label in enumerate(list(labels) + [O_ID]):
        if start is not None and label != labels[start]:
            spans.append(EntitySpan(start, i, labels[start]))
            start = None
        if start is None and label != O_ID:
            start = i
    return spans


def gold_local_ids(batch: Sequence[Sentence], alignment: Sequence[Sequence[int | None]],
                   space: BatchLabelSpace) -> torch.Tensor:
    """Gold local label id for every encoded token row (truncated tokens have no row)."""
    n_rows = sum(1 for sent in alignment for r in sent if r is not None)
    gold = torch.zeros(n_rows, dtype=torch.long)
    for sentence, rows in zip(batch, alignment):
        for span in sentence.spans:
            local = space.global_to_local[span.type_id]
            for j in range(span.start, span.end):
                if rows[j] is not None:
                    gold[rows[j]] = local
    return gold


class BiEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.token_encoder = build_encoder(config.token_encoder_id, config.max_sequence_length)
        self.label_encoder = build_encoder(config.label_encoder_id, config.max_sequence_length)
        if self.token_encoder.hidden_size != self.label_encoder.hidden_size:
            raise ValueError("token and label encoders must share the hidden size")
        self.hidden_size = self.token_encoder.hidden_size
        self.o_vector = nn.Parameter(torch.zeros(self.hidden_size)) if config.learned_o else None
        self._label_cache: dict[tuple[str, str], torch.Tensor] = {}

    def train(self, mode: bool = True):
        # the label cache only serves evaluation; parameters may change once training starts
        if mode:
            self._label_cache.clear()
        return super().train(mode)

    def encode_tokens(self, sentences: Sequence[Sentence | Sequence[str]]):
        """Return ``(e_t, alignment)``: one row per surviving token, and per sentence a
        list mapping each token to its row (``None`` when truncated)."""
        if not sentences:
            raise ValueError("empty batch")
        batch = [s.tokens if isinstance(s, Sentence) else tuple(s) for s in sentences]
        hidden, firsts = self.token_encoder.encode_words(batch, self.config.max_sequence_length)
        rows, alignment = [], []
        for b, first in enumerate(firsts):
            sent_rows = []
            for j, pos in enumerate(first):
                if pos is None:
                    sent_rows.append(None)
                else:
                    sent_rows.append(len(rows))
                    rows.append((b, pos))
            if any(p is None for p in first):
                log.info("sentence %d truncated to %d of %d tokens", b,
                          sum(p is not None for p in first), len(first))
            alignment.append(sent_rows)
        if not rows:
            return hidden.new_zeros((0, self.hidden_size)), alignment
        index_b = torch.tensor([r[0] for r in rows], device=hidden.device)
        index_t = torch.tensor([r[1] for r in rows], device=hidden.device)
        return hidden[index_b, index_t], alignment

    def encode_labels(self, verbalizations: Sequence[str]) -> torch.Tensor:
        if any(not v or not v.strip() for v in verbalizations):
            raise ValueError("empty label verbalization")
        use_cache = not self.training and not torch.is_grad_enabled()
        if not use_cache:
            return self.label_encoder.encode_texts(list(verbalizations),
                                                   self.config.max_sequence_length)
        key = self.config.label_encoder_id
        missing = list(dict.fromkeys(v for v in verbalizations if (key, v) not in self._label_cache))
        if missing:
            fresh = self.label_encoder.encode_texts(missing, self.config.max_sequence_length)
            for v, vec in zip(missing, fresh):
                self._label_cache[(key, v)] = vec
        return torch.stack([self._label_cache[(key, v)] for v in verbalizations])

    def label_space_embeddings(self, space: BatchLabelSpace, inventory: TypeInventory) -> torch.Tensor:
        names = [inventory[t] for t in space.local_labels]
        if self.config.o_verbalization is not None:
            names[0] = self.config.o_verbalization
        if self.o_vector is None:
            return self.encode_labels(names)
        entity = self.encode_labels(names[1:]) if len(names) > 1 \
            else self.o_vector.new_zeros((0, self.hidden_size))
        return torch.cat([self.o_vector.unsqueeze(0), entity])

    def forward(self, sentences: Sequence[Sentence], space: BatchLabelSpace,
                inventory: TypeInventory):
        """Logits (rows x local labels) and the token alignment for ``sentences``."""
        e_t, alignment = self.encode_tokens(sentences)
        e_l = self.label_space_embeddings(space, inventory)
        space.embeddings = e_l
        return score(e_t, e_l), alignment

    @torch.no_grad()
    def predict_spans(self, sentences: Sequence[Sentence], labels: Sequence[str],
                      inventory: TypeInventory, batch_size: int = 16) -> list[list[EntitySpan]]:
        """Decode spans over the label space ``O + labels`` for every sentence."""
        was_training = self.training
        self.eval()
        space = BatchLabelSpace.from_types(labels)
        e_l = self.label_space_embeddings(space, inventory)
        out: list[list[EntitySpan]] = []
        for i in range(0, len(sentences), batch_size):
            batch = sentences[i:i + batch_size]
            e_t, alignment = self.encode_tokens(batch)
            ids = predict(score(e_t, e_l)).tolist()
            for sentence, rows in zip(batch, alignment):
                tags = [space.local_labels[ids[r]] if r is not None else O_ID for r in rows]
                out.append(decode_spans(tags))
        self.train(was_training)
        return out

    def clone(self) -> BiEncoder:
        return copy.deepcopy(self)

    # -- checkpoints ------------------------------------------------------

    def save(self, directory: str | Path, inventory: TypeInventory | None = None,
             provenance: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.token_encoder.state_dict(), directory / "token_encoder.pt")
        torch.save(self.label_encoder.state_dict(), directory / "label_encoder.pt")
        if self.o_vector is not None:
            torch.save(self.o_vector.detach().cpu(), directory / "o_vector.pt")
        manifest = {
            "schema_version": MANIFEST_VERSION,
            "config": asdict(self.config),
            "o_verbalization": self.config.o_verbalization
            or (inventory.o_verbalization if inventory is not None else DEFAULT_O_VERBALIZATION),
            "inventory_hash": inventory_hash(inventory) if inventory is not None else None,
            "provenance": provenance or {},
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> BiEncoder:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("schema_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {manifest.get('schema_version')}")
        model = cls(EncoderConfig(**manifest["config"]))
        model.token_encoder.load_state_dict(torch.load(directory / "token_encoder.pt"))
        model.label_encoder.load_state_dict(torch.load(directory / "label_encoder.pt"))
        if model.o_vector is not None:
            model.o_vector.data.copy_(torch.load(directory / "o_vector.pt"))
        model._label_cache.clear()
        return model


def inventory_hash(inventory: TypeInventory) -> str:
    payload = json.dumps(inventory.to_json(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
