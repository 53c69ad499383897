"""Seeded toy corpora for smoke runs, tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .data import PairRecord


def word_list(size: int, prefix: str = "w") -> list[str]:
    width = len(str(size - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(size)]


def synthetic_pairs(
    n: int,
    seed: int = 0,
    words: int = 400,
    passage_len: int = 12,
    query_len: int = 4,
    negatives: int = 0,
    dataset_id: str = "synthetic",
    prefix: str = "w",
) -> list[PairRecord]:
    """Queries are word subsets of their passage; negatives are unrelated passages."""
    rng = np.random.default_rng(seed)
    vocab = word_list(words, prefix)

    def passage():
        return [vocab[i] for i in rng.choice(words, size=passage_len, replace=False)]

    out = []
    for _ in range(n):
        p = passage()
        q = [p[i] for i in sorted(rng.choice(passage_len, size=query_len, replace=False))]
        negs = [" ".join(passage()) for _ in range(negatives)]
        out.append(PairRecord(" ".join(q), " ".join(p), negs, dataset_id))
    return out


def synthetic_sentences(n: int, seed: int = 0, words: int = 200, length: tuple[int, int] = (8, 16)) -> list[str]:
    """Sentences with a learnable structure: each is a run of consecutive word ids."""
    rng = np.random.default_rng(seed)
    vocab = word_list(words)
    out = []
    for _ in range(n):
        k = int(rng.integers(length[0], length[1] + 1))
        start = int(rng.integers(0, words))
        out.append(" ".join(vocab[(start + j) % words] for j in range(k)))
    return out


class BagOfWordsTeacher:
    """Cosine over word-count vectors; a cheap lexical teacher for toy distillation."""

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def score_matrix(self, queries, passages) -> np.ndarray:
        words = sorted({w for t in (*queries, *passages) for w in t.lower().split()})
        index = {w: i for i, w in enumerate(words)}

        def counts(texts):
            out = np.zeros((len(texts), max(len(words), 1)))
            for r, t in enumerate(texts):
                for w in t.lower().split():
                    out[r, index[w]] += 1
            norms = np.linalg.norm(out, axis=1, keepdims=True)
            return out / np.where(norms > 0, norms, 1.0)

        return self.scale * (counts(queries) @ counts(passages).T)
