import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embkit.data import (
    BatchSampler,
    DataError,
    MinerConfig,
    PairRecord,
    ParseError,
    PerturbConfig,
    SamplerConfig,
    dataset_probabilities,
    delete_span,
    format_instruction_query,
    mine_dataset,
    mine_hard_negatives,
    perturb_positive,
    read_corpus,
    read_pairs,
    select_negatives,
    swap_spans,
    write_pairs,
)
from embkit.synthetic import synthetic_pairs


# probabilities ----------------------------------------------------------------


def test_probabilities_sqrt():
    p = dataset_probabilities({"a": 100, "b": 400}, SamplerConfig(0.5))
    assert p["a"] == pytest.approx(1 / 3, abs=1e-12)
    assert p["b"] == pytest.approx(2 / 3, abs=1e-12)


def test_probabilities_alpha_zero_uniform():
    p = dataset_probabilities({"a": 1, "b": 10, "c": 10_000}, SamplerConfig(0.0))
    assert all(v == pytest.approx(1 / 3, abs=1e-15) for v in p.values())


def test_probabilities_alpha_point_nine():
    p = dataset_probabilities({"a": 10, "b": 90}, SamplerConfig(0.9))
    wa, wb = math.pow(10, 0.9), math.pow(90, 0.9)
    assert p["a"] == pytest.approx(0.121, abs=1e-3)
    assert p["b"] == pytest.approx(0.879, abs=1e-3)
    assert p["a"] == pytest.approx(wa / (wa + wb), abs=1e-12)


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.integers(1, 10**9), min_size=1, max_size=8))
def test_probabilities_proportional_at_alpha_one(stats):
    p = dataset_probabilities(stats, SamplerConfig(1.0))
    total = sum(stats.values())
    assert abs(sum(p.values()) - 1) < 1e-12
    for k, v in stats.items():
        assert p[k] == pytest.approx(v / total, rel=1e-9)


@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=6), st.floats(0.01, 3))
def test_probabilities_monotone(sizes, alpha):
    p = dataset_probabilities({str(i): s for i, s in enumerate(sizes)}, SamplerConfig(alpha))
    for i in range(len(sizes)):
        for j in range(len(sizes)):
            if sizes[i] < sizes[j]:
                assert p[str(i)] <= p[str(j)]


def test_probabilities_errors():
    with pytest.raises(DataError):
        dataset_probabilities({})
    with pytest.raises(DataError):
        dataset_probabilities({"a": 0})
    with pytest.raises(DataError):
        SamplerConfig(float("nan"))


# sampler ----------------------------------------------------------------------


def _datasets(sizes):
    return {name: [PairRecord(f"q{name}{i}", f"p{name}{i}", [], name) for i in range(n)] for name, n in sizes.items()}


def test_single_dataset_always_chosen():
    s = BatchSampler(_datasets({"only": 7}), SamplerConfig(0.5, seed=1))
    for _ in range(50):
        assert {r.dataset_id for r in s.next_batch(3)} == {"only"}


def test_batches_never_mix_datasets():
    s = BatchSampler(_datasets({"a": 5, "b": 13, "c": 40}), SamplerConfig(0.5, seed=2))
    for _ in range(10_000):
        assert len({r.dataset_id for r in s.next_batch(4)}) == 1


def test_epoch_without_replacement_and_wraparound():
    s = BatchSampler(_datasets({"a": 6}), SamplerConfig(seed=3))
    first = [r.query for r in s.next_batch(6)]
    assert sorted(first) == sorted(f"qa{i}" for i in range(6))
    wrapped = [r.query for r in s.next_batch(9)]
    assert Counter(wrapped[:6]) == Counter(first)


def test_sampler_frequencies_monte_carlo():
    sizes = {"a": 10, "b": 200, "c": 3000}
    s = BatchSampler(_datasets(sizes), SamplerConfig(0.5, seed=7))
    counts = Counter()
    for _ in range(100_000):
        counts[s.choose_dataset()] += 1
        s.step += 1
    probs = dataset_probabilities(sizes, SamplerConfig(0.5))
    for name, p in probs.items():
        assert abs(counts[name] / 100_000 - p) < 0.01


def test_sampler_state_resume():
    data = _datasets({"a": 5, "b": 9})
    a = BatchSampler(data, SamplerConfig(0.7, seed=4))
    for _ in range(7):
        a.next_batch(3)
    b = BatchSampler(data, SamplerConfig(0.7, seed=4))
    b.set_state(json.loads(json.dumps(a.get_state())))
    for _ in range(10):
        assert a.next_batch(3) == b.next_batch(3)


def test_sampler_seeded():
    data = _datasets({"a": 5, "b": 9})
    runs = [[r.query for _ in range(20) for r in BatchSampler(data, SamplerConfig(seed=9)).next_batch(2)] for _ in range(2)]
    assert runs[0] == runs[1]


# mining -----------------------------------------------------------------------


def _unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def test_mining_drops_near_duplicate():
    pos = _unit(0.0)
    near = _unit(math.acos(0.99))
    far = _unit(math.acos(0.2))
    query = _unit(0.05)
    for seed in range(20):
        res = select_negatives(query, pos, np.stack([near, far]), MinerConfig(top_k=2, seed=seed))
        assert res.indices == [1] and res.status == "ok"


def test_mining_threshold_one_filters_nothing():
    pos = _unit(0.0)
    corpus = np.stack([_unit(0.0), _unit(0.1), _unit(2.0)])
    seen = set()
    for seed in range(60):
        res = select_negatives(_unit(0.0), pos, corpus, MinerConfig(false_negative_threshold=1.0, seed=seed))
        seen.update(res.indices)
    assert seen == {0, 1, 2}


def test_mining_pool_clamped_to_corpus():
    rng = np.random.default_rng(0)
    corpus = rng.normal(size=(5, 3))
    res = select_negatives(rng.normal(size=3), rng.normal(size=3), corpus, MinerConfig(top_k=100, false_negative_threshold=1.0))
    assert sorted(res.pool) == [0, 1, 2, 3, 4]


def test_mining_pool_is_top_k_by_query_cosine():
    rng = np.random.default_rng(1)
    corpus = rng.normal(size=(30, 4))
    q = rng.normal(size=4)
    res = select_negatives(q, rng.normal(size=4), corpus, MinerConfig(top_k=7, false_negative_threshold=1.0))
    cos = corpus @ q / np.linalg.norm(corpus, axis=1) / np.linalg.norm(q)
    assert res.pool == sorted(range(30), key=lambda i: -cos[i])[:7]


def test_mining_no_survivors(caplog):
    pos = _unit(0.0)
    res = select_negatives(pos, pos, np.stack([_unit(0.01)]), MinerConfig(false_negative_threshold=0.5))
    assert res.indices == [] and res.status == "no_survivors"
    assert "no candidates" in caplog.text


def _bag_scorer(texts):
    vocab = sorted({w for t in texts for w in t.split()} | set("abcdefgh"))
    out = np.zeros((len(texts), len(vocab)))
    for i, t in enumerate(texts):
        for w in t.split():
            out[i, vocab.index(w)] += 1
    return out + 1e-3


def test_mining_never_returns_positive_or_false_negative():
    corpus = ["a b c", "a b c d", "e f", "g h", "a e", "b g"]
    cfg = MinerConfig(top_k=6, false_negative_threshold=0.8, negatives_per_query=2)
    for seed in range(25):
        negs, status = mine_hard_negatives("a b", "a b c", corpus, _bag_scorer, cfg, np.random.default_rng(seed))
        assert status == "ok" and "a b c" not in negs
        assert "a b c d" not in negs  # cosine 0.87 to the positive


def test_mine_dataset_thread_independent():
    records = synthetic_pairs(12, seed=3, words=30, passage_len=5, query_len=2)
    corpus = [r.positive for r in synthetic_pairs(20, seed=4, words=30, passage_len=5, query_len=2)]

    def scorer(texts):
        vocab = {f"w{i:02d}": i for i in range(30)}
        out = np.full((len(texts), 30), 1e-3)
        for i, t in enumerate(texts):
            for w in t.split():
                out[i, vocab[w]] += 1
        return out

    cfg = MinerConfig(top_k=5, negatives_per_query=2, seed=5)
    one, skipped1 = mine_dataset(records, corpus, scorer, cfg, threads=1)
    four, skipped4 = mine_dataset(records, corpus, scorer, cfg, threads=4)
    assert [r.to_json() for r in one] == [r.to_json() for r in four]
    assert skipped1 == skipped4
    assert all(len(r.negatives) == 2 for r in one)


def test_miner_config_validation():
    with pytest.raises(DataError):
        MinerConfig(top_k=1, negatives_per_query=2)
    with pytest.raises(DataError):
        MinerConfig(false_negative_threshold=0.0)


# perturbation -------------------------------------------------------------------


TEN = "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9"


def test_delete_fixed_fraction_removes_two_of_ten():
    cfg = PerturbConfig("delete_span", 0.2, 0.2)
    for seed in range(30):
        out = perturb_positive(TEN, cfg, np.random.default_rng(seed)).split()
        assert len(out) == 8
        # the removed tokens form one contiguous span
        kept = [int(t[1:]) for t in out]
        missing = sorted(set(range(10)) - set(kept))
        assert missing[1] - missing[0] == 1 and kept == sorted(kept)


def test_swap_hand_trace():
    assert swap_spans(list("abcd"), 0, 2, 1) == list("cbad")
    assert delete_span(list("abcd"), 1, 2) == list("ad")
    with pytest.raises(DataError):
        swap_spans(list("abcd"), 0, 1, 2)


@settings(max_examples=60)
@given(st.integers(4, 30), st.integers(0, 10**6), st.sampled_from(["delete_span", "swap_spans"]))
def test_perturb_changes_text_and_swap_preserves_multiset(n, seed, mode):
    text = " ".join(f"x{i}" for i in range(n))
    out = perturb_positive(text, PerturbConfig(mode), np.random.default_rng(seed))
    assert out != text
    if mode == "swap_spans":
        assert Counter(out.split()) == Counter(text.split())


def test_swap_on_repetitive_text_still_changes():
    text = "a a a a a b"
    for seed in range(20):
        out = perturb_positive(text, PerturbConfig("swap_spans"), np.random.default_rng(seed))
        assert out != text and sorted(out.split()) == sorted(text.split())


def test_perturb_seeded_and_too_short():
    cfg = PerturbConfig("swap_spans", seed=11)
    assert perturb_positive(TEN, cfg) == perturb_positive(TEN, cfg)
    with pytest.raises(DataError):
        perturb_positive("a b c", cfg)
    with pytest.raises(DataError):
        PerturbConfig("shuffle")
    with pytest.raises(DataError):
        PerturbConfig(span_frac_low=0.0)


# instruction format -------------------------------------------------------------


def test_instruction_format():
    assert (
        format_instruction_query("Retrieve relevant passages", "who wrote hamlet")
        == "Instruct: Retrieve relevant passages Query: who wrote hamlet"
    )
    assert format_instruction_query("", "x") == "Instruct:  Query: x"
    once = format_instruction_query("t", "q")
    assert format_instruction_query("t", once) == "Instruct: t Query: Instruct: t Query: q"


# files --------------------------------------------------------------------------


def test_pairs_roundtrip(tmp_path):
    recs = synthetic_pairs(5, seed=1, negatives=2, dataset_id="de")
    path = tmp_path / "pairs.jsonl"
    write_pairs(path, recs)
    assert read_pairs(path) == recs


def test_pairs_parse_error_line_number(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text('{"query": "a", "positive": "b"}\n\n{"query": "a"\n')
    with pytest.raises(ParseError) as exc:
        read_pairs(path)
    assert exc.value.lineno == 3 and ":3:" in str(exc.value)


def test_pairs_max_negatives(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text(json.dumps({"query": "a", "positive": "b", "negatives": ["c", "d"]}) + "\n")
    assert len(read_pairs(path, max_negatives=2)[0].negatives) == 2
    with pytest.raises(ParseError):
        read_pairs(path, max_negatives=1)


def test_pairs_reject_empty_query(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text(json.dumps({"query": "", "positive": "b"}) + "\n")
    with pytest.raises(ParseError):
        read_pairs(path)


def test_corpus_duplicate_ids(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "1", "text": "a"}\n{"id": "1", "text": "b"}\n')
    with pytest.raises(DataError):
        read_corpus(path)
