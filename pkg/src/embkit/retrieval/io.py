"""TSV formats for qrels and run files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from ..data import ParseError


def _rows(path, width: int):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise ParseError(path, lineno, f"expected {width} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def read_qrels(path) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    for lineno, (qid, doc, grade) in _rows(path, 3):
        try:
            g = int(grade)
        except ValueError:
            raise ParseError(Path(path), lineno, f"grade {grade!r} is not an integer") from None
        if g < 0:
            raise ParseError(Path(path), lineno, "grade must be nonnegative")
        qrels.setdefault(qid, {})[doc] = g
    return qrels


def write_qrels(path, qrels: Mapping[str, Mapping[str, int]]) -> None:
    lines = [f"{q}\t{d}\t{g}\n" for q in sorted(qrels) for d, g in sorted(qrels[q].items())]
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_run(path, results: Mapping[str, Sequence[tuple[str, float]]]) -> None:
    lines = []
    for qid in sorted(results):
        for rank, (doc, score) in enumerate(results[qid], start=1):
            lines.append(f"{qid}\t{doc}\t{rank}\t{score!r}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_run(path) -> dict[str, list[tuple[str, float]]]:
    """Return per-query (doc, score) lists ordered by the rank column."""
    ranked: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, (qid, doc, rank, score) in _rows(path, 4):
        try:
            r, s = int(rank), float(score)
        except ValueError:
            raise ParseError(Path(path), lineno, "rank must be an integer and score a float") from None
        ranked.setdefault(qid, []).append((r, doc, s))
    return {q: [(d, s) for _, d, s in sorted(rows)] for q, rows in ranked.items()}


def run_rankings(run: Mapping[str, Sequence[tuple[str, float]]]) -> dict[str, list[str]]:
    return {q: [d for d, _ in rows] for q, rows in run.items()}
