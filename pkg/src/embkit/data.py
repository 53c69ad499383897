"""Pair datasets, per-dataset batch sampling, hard-negative mining,
positive perturbation and instruction-query formatting."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path, self.lineno = path, lineno


@dataclass
class PairRecord:
    query: str
    positive: str
    negatives: list[str] = field(default_factory=list)
    dataset_id: str = "default"

    def __post_init__(self):
        if not self.query or not self.positive:
            raise DataError("query and positive must be non-empty")
        self.negatives = list(self.negatives)

    def to_json(self) -> dict:
        return {"query": self.query, "positive": self.positive, "negatives": self.negatives, "dataset": self.dataset_id}


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            yield lineno, obj


def read_pairs(path, max_negatives: int | None = None) -> list[PairRecord]:
    records = []
    for lineno, obj in _read_jsonl(path):
        try:
            query, positive = obj["query"], obj["positive"]
        except KeyError as exc:
            raise ParseError(path, lineno, f"missing field {exc.args[0]!r}") from None
        negatives = obj.get("negatives", [])
        if not isinstance(query, str) or not isinstance(positive, str) or not isinstance(negatives, list):
            raise ParseError(path, lineno, "query/positive must be strings and negatives a list")
        if max_negatives is not None and len(negatives) > max_negatives:
            raise ParseError(path, lineno, f"{len(negatives)} negatives exceed the maximum of {max_negatives}")
        try:
            records.append(PairRecord(query, positive, negatives, str(obj.get("dataset", "default"))))
        except DataError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return records


def write_pairs(path, records: Iterable[PairRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def read_corpus(path) -> list[tuple[str, str]]:
    out = []
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj.get("id"), str) or not isinstance(obj.get("text"), str):
            raise ParseError(path, lineno, "corpus lines need string 'id' and 'text'")
        out.append((obj["id"], obj["text"]))
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate document ids")
    return out


def write_corpus(path, docs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc_id, text in docs:
            fh.write(json.dumps({"id": doc_id, "text": text}, ensure_ascii=False) + "\n")


def group_by_dataset(records: Iterable[PairRecord]) -> dict[str, list[PairRecord]]:
    out: dict[str, list[PairRecord]] = {}
    for r in records:
        out.setdefault(r.dataset_id, []).append(r)
    return out


# sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    alpha_sampling: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.alpha_sampling) or self.alpha_sampling < 0:
            raise DataError("alpha_sampling must be a finite non-negative number")


def dataset_probabilities(stats: Mapping[str, int], cfg: SamplerConfig = SamplerConfig()) -> dict[str, float]:
    """p_i = |D_i|^alpha / sum_j |D_j|^alpha, in the mapping's order."""
    if not stats:
        raise DataError("no datasets to sample from")
    if any(size < 1 for size in stats.values()):
        raise DataError("dataset sizes must be at least 1")
    names = list(stats)
    # logs keep large sizes and exponents from overflowing
    logw = cfg.alpha_sampling * np.log(np.array([stats[n] for n in names], dtype=np.float64))
    w = np.exp(logw - logw.max())
    p = w / w.sum()
    return dict(zip(names, p.tolist()))


class BatchSampler:
    """Draws each batch from a single dataset chosen by temperature sampling.

    Within a dataset records are consumed without replacement along a seeded
    permutation; an exhausted dataset starts a new epoch with a fresh
    permutation. All randomness is derived from (seed, step) or
    (seed, dataset, epoch), so the sampler state is a few integers.
    """

    def __init__(self, datasets: Mapping[str, Sequence], cfg: SamplerConfig = SamplerConfig()):
        if not datasets:
            raise DataError("no datasets to sample from")
        self.names = list(datasets)
        self.datasets = {n: list(datasets[n]) for n in self.names}
        for name, recs in self.datasets.items():
            if not recs:
                raise DataError(f"dataset {name!r} is empty")
        self.cfg = cfg
        probs = dataset_probabilities({n: len(self.datasets[n]) for n in self.names}, cfg)
        self.probs = np.array([probs[n] for n in self.names])
        self._cum = np.cumsum(self.probs)
        self.step = 0
        self.cursor = {n: 0 for n in self.names}
        self.epoch = {n: 0 for n in self.names}
        self._perm: dict[str, np.ndarray] = {}

    def _permutation(self, name: str) -> np.ndarray:
        key = (name, self.epoch[name])
        if self._perm.get(name, (None,))[0] != key:
            idx = self.names.index(name)
            perm = np.random.default_rng([self.cfg.seed, 1, idx, self.epoch[name]]).permutation(len(self.datasets[name]))
            self._perm[name] = (key, perm)
        return self._perm[name][1]

    def choose_dataset(self) -> str:
        u = np.random.default_rng([self.cfg.seed, 0, self.step]).random()
        i = int(np.searchsorted(self._cum, u * self._cum[-1], side="right"))
        return self.names[min(i, len(self.names) - 1)]

    def next_batch(self, batch_size: int) -> list:
        if batch_size < 1:
            raise DataError("batch_size must be positive")
        name = self.choose_dataset()
        self.step += 1
        recs = self.datasets[name]
        out = []
        while len(out) < batch_size:
            perm = self._permutation(name)
            take = min(batch_size - len(out), len(recs) - self.cursor[name])
            out.extend(recs[j] for j in perm[self.cursor[name] : self.cursor[name] + take])
            self.cursor[name] += take
            if self.cursor[name] == len(recs):
                self.cursor[name] = 0
                self.epoch[name] += 1
        return out

    def get_state(self) -> dict:
        return {"step": self.step, "cursor": dict(self.cursor), "epoch": dict(self.epoch)}

    def set_state(self, state: Mapping) -> None:
        self.step = int(state["step"])
        self.cursor = {n: int(state["cursor"][n]) for n in self.names}
        self.epoch = {n: int(state["epoch"][n]) for n in self.names}


# hard negatives ---------------------------------------------------------------


@dataclass(frozen=True)
class MinerConfig:
    top_k: int = 100
    false_negative_threshold: float = 0.8
    negatives_per_query: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.top_k >= self.negatives_per_query >= 1:
            raise DataError("need top_k >= negatives_per_query >= 1")
        if not 0.0 < self.false_negative_threshold <= 1.0:
            raise DataError("false_negative_threshold must lie in (0, 1]")


@dataclass
class MiningResult:
    indices: list[int]  # into the corpus
    status: str = "ok"  # or "no_survivors"
    pool: list[int] = field(default_factory=list)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("zero-norm embedding")
    return m / norms


def select_negatives(
    query_vec, positive_vec, corpus_vecs, cfg: MinerConfig = MinerConfig(), rng: np.random.Generator | None = None
) -> MiningResult:
    """Rank corpus by cosine to the query, keep the top ``top_k``, drop those
    whose cosine to the positive exceeds the threshold, sample the rest."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    corpus = _unit_rows(corpus_vecs)
    q = _unit_rows(query_vec)[0]
    p = _unit_rows(positive_vec)[0]
    to_query = corpus @ q
    order = np.lexsort((np.arange(len(corpus)), -to_query))
    pool = order[: min(cfg.top_k, len(corpus))]
    to_positive = np.clip(corpus[pool] @ p, -1.0, 1.0)
    survivors = pool[to_positive <= cfg.false_negative_threshold]
    if survivors.size == 0:
        log.warning("hard-negative mining: no candidates survive the false-negative filter")
        return MiningResult([], "no_survivors", pool.tolist())
    count = min(cfg.negatives_per_query, survivors.size)
    picked = rng.choice(survivors, size=count, replace=False)
    return MiningResult([int(i) for i in picked], "ok", pool.tolist())


def mine_hard_negatives(
    query: str,
    positive: str,
    corpus: Sequence[str],
    scorer: Callable[[Sequence[str]], np.ndarray],
    cfg: MinerConfig = MinerConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[list[str], str]:
    """Text-level mining; ``scorer`` maps texts to an embedding matrix."""
    keep = [i for i, t in enumerate(corpus) if t != positive]
    texts = [corpus[i] for i in keep]
    if not texts:
        return [], "no_survivors"
    vecs = scorer([query, positive, *texts])
    res = select_negatives(vecs[0], vecs[1], vecs[2:], cfg, rng)
    return [texts[i] for i in res.indices], res.status


def mine_dataset(
    records: Sequence[PairRecord],
    corpus: Sequence[str],
    scorer: Callable[[Sequence[str]], np.ndarray],
    cfg: MinerConfig = MinerConfig(),
    threads: int = 1,
) -> tuple[list[PairRecord], int]:
    """Mine negatives for every record; records with no survivors are skipped.

    Returns the mined records and the skip count. Results do not depend on
    ``threads``: every record draws from its own seeded generator.
    """
    corpus_vecs = scorer(list(corpus))
    qp = scorer([t for r in records for t in (r.query, r.positive)])

    def one(i: int):
        r = records[i]
        mask = np.array([t != r.positive for t in corpus])
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return None
        res = select_negatives(qp[2 * i], qp[2 * i + 1], corpus_vecs[idx], cfg, np.random.default_rng([cfg.seed, i]))
        if res.status != "ok":
            return None
        return PairRecord(r.query, r.positive, [corpus[idx[j]] for j in res.indices], r.dataset_id)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(len(records))))
    else:
        results = [one(i) for i in range(len(records))]
    mined = [r for r in results if r is not None]
    return mined, len(results) - len(mined)


# perturbation -----------------------------------------------------------------


@dataclass(frozen=True)
class PerturbConfig:
    mode: str = "delete_span"
    span_frac_low: float = 0.1
    span_frac_high: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("delete_span", "swap_spans"):
            raise DataError(f"unknown perturbation mode {self.mode!r}")
        if not 0.0 < self.span_frac_low <= self.span_frac_high < 1.0:
            raise DataError("span fractions must satisfy 0 < low <= high < 1")


def delete_span(tokens: Sequence[str], start: int, length: int) -> list[str]:
    return list(tokens[:start]) + list(tokens[start + length :])


def swap_spans(tokens: Sequence[str], i: int, j: int, length: int) -> list[str]:
    """Exchange ``tokens[i:i+length]`` and ``tokens[j:j+length]`` (i + length <= j)."""
    if not (0 <= i and i + length <= j and j + length <= len(tokens)):
        raise DataError("spans overlap or run past the end")
    t = list(tokens)
    t[i : i + length], t[j : j + length] = t[j : j + length], t[i : i + length]
    return t


def perturb_positive(text: str, cfg: PerturbConfig = PerturbConfig(), rng: np.random.Generator | None = None) -> str:
    tokens = text.split()
    n = len(tokens)
    if n < 4:
        raise DataError(f"need at least 4 tokens to perturb, got {n}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    frac = rng.uniform(cfg.span_frac_low, cfg.span_frac_high)
    length = max(1, math.ceil(frac * n - 1e-9))
    if cfg.mode == "delete_span":
        length = min(length, n - 1)
        start = int(rng.integers(0, n - length + 1))
        return " ".join(delete_span(tokens, start, length))
    length = min(length, n // 2)
    for _ in range(32):
        i = int(rng.integers(0, n - 2 * length + 1))
        j = int(rng.integers(i + length, n - length + 1))
        out = swap_spans(tokens, i, j, length)
        if out != tokens:
            return " ".join(out)
    for k in range(length, 0, -1):  # deterministic fallback for repetitive text
        for i in range(n - 2 * k + 1):
            for j in range(i + k, n - k + 1):
                out = swap_spans(tokens, i, j, k)
                if out != tokens:
                    return " ".join(out)
    raise DataError("no span swap changes this text")


def format_instruction_query(task_definition: str, query: str) -> str:
    return f"Instruct: {task_definition} Query: {query}"
