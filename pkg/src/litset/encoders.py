"""Text encoders behind the bi-encoder.

Two families share one interface:

* ``tiny:...`` ids build a small randomly initialised transformer over a
  hashing subword tokenizer. No downloads, used for tests and desk-scale runs.
  Example: ``tiny:layers=2,hidden=64,heads=4,vocab=8192``.
* anything else is treated as a Hugging Face model name or path and loaded
  with ``transformers.AutoModel`` / ``AutoTokenizer`` (fast tokenizer required).

``encode_words`` returns per-word vectors using the first subword of every
word; ``encode_texts`` returns the first-position ([CLS]) vector of each text.
"""
from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

log = logging.getLogger(__name__)

PAD_ID, CLS_ID, SEP_ID = 0, 1, 2
_N_SPECIAL = 3


@dataclass(frozen=True)
class TinySpec:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    vocab: int = 8192
    piece: int = 4
    dropout: float = 0.0
    ffn: int = 0  # 0 -> 4 * hidden

    @classmethod
    def parse(cls, encoder_id: str) -> TinySpec:
        body = encoder_id.split(":", 1)[1] if ":" in encoder_id else ""
        kwargs = {}
        for item in filter(None, (p.strip() for p in body.split(","))):
            key, value = item.split("=", 1)
            kwargs[key] = float(value) if key == "dropout" else int(value)
        return cls(**kwargs)


def is_tiny(encoder_id: str) -> bool:
    return encoder_id == "tiny" or encoder_id.startswith("tiny:")


class HashingSubwordTokenizer:
    """Deterministic subword splitter: fixed-width character pieces hashed into a vocabulary."""

    def __init__(self, vocab_size: int = 8192, piece: int = 4, lowercase: bool = True):
        if vocab_size <= _N_SPECIAL:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size
        self.piece = piece
        self.lowercase = lowercase

    def _piece_id(self, piece: str) -> int:
        return _N_SPECIAL + zlib.crc32(piece.encode("utf-8")) % (self.vocab_size - _N_SPECIAL)

    def word_ids(self, word: str) -> list[int]:
        if self.lowercase:
            word = word.lower()
        chunks = [word[i:i + self.piece] for i in range(0, len(word), self.piece)] or [""]
        return [self._piece_id(c if i == 0 else "##" + c) for i, c in enumerate(chunks)]

    def text_ids(self, text: str) -> list[int]:
        return [i for w in text.split() for i in self.word_ids(w)]


class TextEncoder(nn.Module):
    hidden_size: int

    def encode_words(self, batch: Sequence[Sequence[str]], max_length: int):
        """Return ``(hidden, first)``: hidden states ``B x T x H`` and, per sentence,
        the position of each word's first subword (``None`` if truncated away)."""
        raise NotImplementedError

    def encode_texts(self, texts: Sequence[str], max_length: int) -> torch.Tensor:
        raise NotImplementedError


class TinyTransformer(TextEncoder):
    def __init__(self, spec: TinySpec, max_length: int = 512):
        super().__init__()
        self.spec = spec
        self.hidden_size = spec.hidden
        self.tokenizer = HashingSubwordTokenizer(spec.vocab, spec.piece)
        self.embed = nn.Embedding(spec.vocab, spec.hidden, padding_idx=PAD_ID)
        self.position = nn.Embedding(max_length, spec.hidden)
        layer = nn.TransformerEncoderLayer(
            spec.hidden, spec.heads, spec.ffn or 4 * spec.hidden, dropout=spec.dropout,
            batch_first=True, norm_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, spec.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(spec.hidden)
        self.max_positions = max_length

    def _run(self, ids: list[list[int]]) -> torch.Tensor:
        width = max(len(x) for x in ids)
        device = self.embed.weight.device
        input_ids = torch.full((len(ids), width), PAD_ID, dtype=torch.long, device=device)
        for i, row in enumerate(ids):
            input_ids[i, :len(row)] = torch.tensor(row, dtype=torch.long)
        pad = input_ids == PAD_ID
        pos = torch.arange(width, device=device).unsqueeze(0)
        x = self.embed(input_ids) + self.position(pos)
        return self.norm(self.layers(x, src_key_padding_mask=pad))

    def encode_words(self, batch, max_length):
        max_length = min(max_length, self.max_positions)
        ids, firsts = [], []
        for words in batch:
            row, first = [CLS_ID], []
            for word in words:
                pieces = self.tokenizer.word_ids(word)
                if len(row) + len(pieces) > max_length - 1:
                    break
                first.append(len(row))
                row.extend(pieces)
            first += [None] * (len(words) - len(first))
            ids.append(row + [SEP_ID])
            firsts.append(first)
        return self._run(ids), firsts

    def encode_texts(self, texts, max_length):
        max_length = min(max_length, self.max_positions)
        ids = [([CLS_ID] + self.tokenizer.text_ids(t))[:max_length - 1] + [SEP_ID] for t in texts]
        return self._run(ids)[:, 0]


class HFEncoder(TextEncoder):
    def __init__(self, model_name: str):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.model_name = model_name
        cache_dir = os.environ.get("LITSET_CACHE_DIR")
        self.tokenizer = AutoTokenizer.from_pretrained(model_name, use_fast=True, cache_dir=cache_dir)
        if not self.tokenizer.is_fast:
            raise ValueError(f"{model_name}: a fast tokenizer is required for word alignment")
        self.model = AutoModel.from_pretrained(model_name, cache_dir=cache_dir)
        self.hidden_size = self.model.config.hidden_size

    @property
    def _device(self):
        return next(self.model.parameters()).device

    def encode_words(self, batch, max_length):
        enc = self.tokenizer([list(words) for words in batch], is_split_into_words=True,
                             truncation=True, max_length=max_length, padding=True,
                             return_tensors="pt")
        firsts = []
        for i, words in enumerate(batch):
            first: list[int | None] = [None] * len(words)
            for pos, word in enumerate(enc.word_ids(i)):
                if word is not None and first[word] is None:
                    first[word] = pos
            firsts.append(first)
        out = self.model(**{k: v.to(self._device) for k, v in enc.items()})
        return out.last_hidden_state, firsts

    def encode_texts(self, texts, max_length):
        enc = self.tokenizer(list(texts), truncation=True, max_length=max_length, padding=True,
                             return_tensors="pt")
        out = self.model(**{k: v.to(self._device) for k, v in enc.items()})
        return out.last_hidden_state[:, 0]


def build_encoder(encoder_id: str, max_length: int = 512) -> TextEncoder:
    if is_tiny(encoder_id):
        return TinyTransformer(TinySpec.parse(encoder_id), max_length)
    return HFEncoder(encoder_id)
