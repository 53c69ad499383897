"""Whitespace vocabulary and tokenizer."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)


def split_words(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Token <-> id map. Line number in the vocab file is the id."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id = range(5)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 2048) -> "Vocab":
        """Most frequent words first, ties broken alphabetically."""
        counts = Counter(w for t in texts for w in split_words(t))
        for s in SPECIAL_TOKENS:
            counts.pop(s.lower(), None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        room = max_size - len(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + [w for w, _ in ranked[: max(room, 0)]])

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(t + "\n" for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    def lookup(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def tokenize(text: str, vocab: Vocab, max_seq: int = 512) -> tuple[list[int], list[int]]:
    """``[CLS] body [SEP]``, truncated to ``max_seq`` with ``[SEP]`` kept last."""
    if max_seq < 2:
        raise ValueError("max_seq must be at least 2")
    body = [vocab.lookup(w) for w in split_words(text)][: max_seq - 2]
    ids = [vocab.cls_id, *body, vocab.sep_id]
    return ids, [1] * len(ids)


@dataclass(frozen=True)
class TokenBatch:
    ids: np.ndarray  # int64 [B, L]
    mask: np.ndarray  # bool [B, L]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_batch(seqs: Iterable[Iterable[int]], pad_id: int = 0, length: int | None = None) -> TokenBatch:
    seqs = [list(s) for s in seqs]
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) > width:
            raise ValueError(f"sequence of length {len(s)} exceeds padded width {width}")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return TokenBatch(ids, mask)


def tokenize_batch(texts: Iterable[str], vocab: Vocab, max_seq: int = 512) -> TokenBatch:
    return pad_batch((tokenize(t, vocab, max_seq)[0] for t in texts), vocab.pad_id)
