"""Ranked-retrieval metrics over qrels and runs.

A ranking is a list of doc ids, best first. Qrels map query id to a
{doc id: grade} dict. Queries without any positive grade are dropped from
averages; queries missing from the qrels are skipped with a warning.
"""

from __future__ import annotations

import math
import warnings
from typing import Mapping, Sequence

Qrels = Mapping[str, Mapping[str, int]]
Run = Mapping[str, Sequence[str]]


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be at least 1")


def dcg(grades: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(r + 2) for r, g in enumerate(grades))


def ndcg_single(ranking: Sequence[str], rel: Mapping[str, int], k: int = 10) -> float:
    _check_k(k)
    gains = [rel.get(d, 0) for d in ranking[:k]]
    ideal = dcg(sorted((g for g in rel.values() if g > 0), reverse=True)[:k])
    return dcg(gains) / ideal if ideal > 0 else 0.0


def mrr_single(ranking: Sequence[str], rel: Mapping[str, int], k: int = 5) -> float:
    _check_k(k)
    for r, d in enumerate(ranking[:k], start=1):
        if rel.get(d, 0) > 0:
            return 1.0 / r
    return 0.0


def recall_single(ranking: Sequence[str], rel: Mapping[str, int], k: int = 10) -> float:
    _check_k(k)
    relevant = {d for d, g in rel.items() if g > 0}
    if not relevant:
        return 0.0
    return len(relevant & set(ranking[:k])) / len(relevant)


def _average(fn, run: Run, qrels: Qrels, k: int) -> float:
    values = []
    for qid, ranking in run.items():
        rel = qrels.get(qid)
        if rel is None:
            warnings.warn(f"query {qid!r} not in qrels; skipped", stacklevel=3)
            continue
        if not any(g > 0 for g in rel.values()):
            continue
        values.append(fn(ranking, rel, k))
    return sum(values) / len(values) if values else 0.0


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    return _average(ndcg_single, run, qrels, k)


def mrr_at_k(run: Run, qrels: Qrels, k: int = 5) -> float:
    return _average(mrr_single, run, qrels, k)


def recall_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    return _average(recall_single, run, qrels, k)


def evaluate(run: Run, qrels: Qrels) -> dict[str, float]:
    """Report the three headline metrics under their usual names."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mrr = mrr_at_k(run, qrels, 5)
        rec = recall_at_k(run, qrels, 10)
    return {"nDCG@10": ndcg_at_k(run, qrels, 10), "MRR@5": mrr, "recall@10": rec}
