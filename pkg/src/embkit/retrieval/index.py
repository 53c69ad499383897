"""Exact dense and sparse search.

Scores tie-break by ascending doc id everywhere. Both index types are
immutable once built and can be queried from several threads.

Files start with a magic line. Dense: uint64 N, uint64 d, the ids
(uint32 length + utf-8 each), then N*d little-endian float64. Sparse: uint32
doc count, the ids in ascending order, uint32 vocab size, uint32 term count,
then per term uint32 id, uint32 length and (uint32 doc, float64 weight) pairs.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sparse import SparseVector

DENSE_MAGIC = b"EMBKIT-DENSE-INDEX 1\n"
SPARSE_MAGIC = b"EMBKIT-SPARSE-INDEX 1\n"


class IndexFormatError(ValueError):
    """Malformed index contents or files."""


def _rank(ids: Sequence[str], scores: np.ndarray, id_rank: np.ndarray, k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be at least 1")
    order = np.lexsort((id_rank, -scores))[:k]
    return [(ids[i], float(scores[i])) for i in order]


def _write_ids(ids: Sequence[str]) -> bytes:
    parts = []
    for doc_id in ids:
        raw = doc_id.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


def _read_magic(path, magic: bytes) -> bytes:
    buf = Path(path).read_bytes()
    if not buf.startswith(magic):
        raise IndexFormatError(f"{path}: not a {magic.split()[0].decode()} file")
    return buf[len(magic) :]


def index_kind(path) -> str:
    """'dense' or 'sparse', from the file's magic line."""
    with open(path, "rb") as fh:
        head = fh.read(max(len(DENSE_MAGIC), len(SPARSE_MAGIC)))
    if head.startswith(DENSE_MAGIC):
        return "dense"
    if head.startswith(SPARSE_MAGIC):
        return "sparse"
    raise IndexFormatError(f"{path}: not an index file")


def _read_ids(buf: bytes, off: int, count: int) -> tuple[list[str], int]:
    ids = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        ids.append(buf[off : off + n].decode())
        off += n
    return ids, off


class DenseIndex:
    """Cosine search over a fixed embedding matrix."""

    def __init__(self, ids: Sequence[str], embeddings):
        self.ids = list(ids)
        self.embeddings = np.array(embeddings, dtype=np.float64).reshape(len(self.ids), -1) if self.ids else np.zeros((0, 0))
        if len(set(self.ids)) != len(self.ids):
            raise IndexFormatError("document ids must be unique")
        self.norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(self.norms == 0):
            raise IndexFormatError("zero-norm document embedding")
        self._unit = self.embeddings / self.norms[:, None] if self.ids else self.embeddings
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object))) if self.ids else np.zeros(0, int)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1] if self.ids else 0

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0:
            raise IndexFormatError("zero-norm query embedding")
        return self._unit @ (q / norm)

    def search(self, query, k: int = 10) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be at least 1")
        if not self.ids:
            return []
        return _rank(self.ids, self.scores(query), self._id_rank, k)

    def save(self, path) -> None:
        n, d = len(self.ids), self.dim
        arr = np.ascontiguousarray(self.embeddings, dtype="<f8")
        Path(path).write_bytes(DENSE_MAGIC + struct.pack("<QQ", n, d) + _write_ids(self.ids) + arr.tobytes())

    @classmethod
    def load(cls, path) -> "DenseIndex":
        buf = _read_magic(path, DENSE_MAGIC)
        n, d = struct.unpack_from("<QQ", buf, 0)
        ids, off = _read_ids(buf, 16, n)
        if len(buf) - off != 8 * n * d:
            raise IndexFormatError(f"{path}: expected {n}x{d} float64 values")
        data = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64).reshape(n, d)
        return cls(ids, data)


def search_dense(index: DenseIndex, query, k: int = 10) -> list[tuple[str, float]]:
    return index.search(query, k)


class InvertedIndex:
    """Term -> posting list of (doc, weight), docs numbered in ascending id order."""

    def __init__(self, docs: Mapping[str, SparseVector] | Iterable[tuple[str, SparseVector]], vocab_size: int | None = None):
        items = list(docs.items() if isinstance(docs, Mapping) else docs)
        ids = [doc_id for doc_id, _ in items]
        if len(set(ids)) != len(ids):
            raise IndexFormatError("document ids must be unique")
        items.sort(key=lambda kv: kv[0])
        self.ids = [doc_id for doc_id, _ in items]
        max_term = max((int(v.terms[-1]) for _, v in items if len(v)), default=-1)
        self.vocab_size = max(max_term + 1, vocab_size or 0)
        buckets: dict[int, tuple[list[int], list[float]]] = {}
        for num, (_, vec) in enumerate(items):
            for t, w in zip(vec.terms.tolist(), vec.weights.tolist()):
                docs_, weights = buckets.setdefault(t, ([], []))
                docs_.append(num)
                weights.append(w)
        self.postings = {
            t: (np.array(d, dtype=np.int64), np.array(w, dtype=np.float64)) for t, (d, w) in sorted(buckets.items())
        }
        self._id_rank = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def doc_count(self) -> int:
        return len(self.ids)

    def scores(self, query: SparseVector) -> tuple[np.ndarray, np.ndarray]:
        acc = np.zeros(len(self.ids))
        touched = np.zeros(len(self.ids), dtype=bool)
        for t, wq in zip(query.terms.tolist(), query.weights.tolist()):
            posting = self.postings.get(t)
            if posting is None:
                continue
            docs, weights = posting
            acc[docs] += wq * weights
            touched[docs] = True
        return acc, touched

    def search(self, query: SparseVector, k: int = 10) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be at least 1")
        acc, touched = self.scores(query)
        hit = np.flatnonzero(touched & (acc > 0))
        if hit.size == 0:
            return []
        order = np.lexsort((hit, -acc[hit]))[:k]
        return [(self.ids[hit[i]], float(acc[hit[i]])) for i in order]

    def save(self, path) -> None:
        chunks = [SPARSE_MAGIC, struct.pack("<I", len(self.ids)), _write_ids(self.ids), struct.pack("<II", self.vocab_size, len(self.postings))]
        for t, (docs, weights) in self.postings.items():
            chunks.append(struct.pack("<II", t, docs.size))
            rec = np.empty(docs.size, dtype=[("doc", "<u4"), ("w", "<f8")])
            rec["doc"], rec["w"] = docs, weights
            chunks.append(rec.tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        buf = _read_magic(path, SPARSE_MAGIC)
        (n,) = struct.unpack_from("<I", buf, 0)
        ids, off = _read_ids(buf, 4, n)
        vocab_size, terms = struct.unpack_from("<II", buf, off)
        off += 8
        rec_t = np.dtype([("doc", "<u4"), ("w", "<f8")])
        self = cls.__new__(cls)
        self.ids, self.vocab_size, self.postings = ids, vocab_size, {}
        for _ in range(terms):
            t, length = struct.unpack_from("<II", buf, off)
            off += 8
            rec = np.frombuffer(buf, dtype=rec_t, count=length, offset=off)
            off += rec_t.itemsize * length
            self.postings[t] = (rec["doc"].astype(np.int64), rec["w"].astype(np.float64))
        if off != len(buf):
            raise IndexFormatError(f"{path}: trailing bytes in sparse index")
        self._id_rank = np.arange(len(ids))
        return self


def search_sparse(index: InvertedIndex, query: SparseVector, k: int = 10) -> list[tuple[str, float]]:
    return index.search(query, k)
