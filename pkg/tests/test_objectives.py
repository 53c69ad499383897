import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from embkit import objectives as O
from embkit import tensor as T
from embkit.gradcheck import check_gradients
from embkit.tensor import Tensor


def make_batch(rng, n, d, k=0, grad=True, ragged=False):
    q = Tensor(rng.normal(size=(n, d)), requires_grad=grad)
    p = Tensor(rng.normal(size=(n, d)), requires_grad=grad)
    negs = None
    if k or ragged:
        counts = rng.integers(0, k + 1, size=n) if ragged else [k] * n
        negs = [Tensor(rng.normal(size=(c, d)), requires_grad=grad) for c in counts]
    return O.ContrastiveBatch(q, p, negs)


def as_lists(batch):
    negs = [neg.data.tolist() for neg in batch.negatives] if batch.negatives else None
    return batch.queries.data.tolist(), batch.positives.data.tolist(), negs


# contrastive ----------------------------------------------------------------


def test_single_query_without_negatives_is_zero():
    rng = np.random.default_rng(0)
    batch = make_batch(rng, 1, 4)
    cfg = O.ContrastiveConfig(tau=0.1, beta=0.0, gamma=0.0)
    assert O.contrastive_loss(batch, cfg).item() == 0.0


def test_contrastive_scale_invariance():
    rng = np.random.default_rng(1)
    b = make_batch(rng, 3, 5, k=2)
    scaled = O.ContrastiveBatch(
        T.scale(b.queries, 7.0), T.scale(b.positives, 7.0), [T.scale(n, 7.0) for n in b.negatives]
    )
    cfg = O.ContrastiveConfig(tau=0.2)
    assert O.contrastive_loss(scaled, cfg).item() == pytest.approx(O.contrastive_loss(b, cfg).item(), abs=1e-12)


def test_contrastive_matches_oracle_fixed_embeddings():
    q = Tensor([[1.0, 0.5], [-0.3, 2.0]])
    p = Tensor([[0.8, 0.1], [0.2, 1.5]])
    batch = O.ContrastiveBatch(q, p)
    cfg = O.ContrastiveConfig(tau=1.0, alpha=1.0, beta=1.0, gamma=1.0)
    expected = oracles.contrastive(q.data.tolist(), p.data.tolist(), None, 1.0, 1, 1, 1)
    assert abs(O.contrastive_loss(batch, cfg).item() - expected) < 1e-10


@pytest.mark.parametrize("alpha,beta,gamma", list(itertools.product([0.0, 1.0], repeat=3)))
@pytest.mark.parametrize("in_batch", [True, False])
def test_contrastive_matches_oracle_with_hard_negatives(alpha, beta, gamma, in_batch):
    rng = np.random.default_rng(int(alpha * 4 + beta * 2 + gamma) + 10 * in_batch)
    batch = make_batch(rng, 3, 6, k=2, ragged=True)
    cfg = O.ContrastiveConfig(tau=0.3, alpha=alpha, beta=beta, gamma=gamma, in_batch=in_batch)
    expected = oracles.contrastive(*as_lists(batch), 0.3, alpha, beta, gamma, in_batch)
    assert abs(O.contrastive_loss(batch, cfg).item() - expected) < 1e-10


def test_contrastive_empty_and_degenerate():
    with pytest.raises(O.EmptyBatchError):
        O.ContrastiveBatch(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))))
    with pytest.raises(T.DegenerateEmbeddingError):
        O.contrastive_loss(O.ContrastiveBatch(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]])))


def test_contrastive_gradients():
    rng = np.random.default_rng(2)
    batch = make_batch(rng, 4, 5, k=1)
    params = [batch.queries, batch.positives, *batch.negatives]
    err = check_gradients(lambda: O.contrastive_loss(batch, O.ContrastiveConfig(tau=0.5)), params)
    assert err < 1e-4


def test_contrastive_monotone_in_positive_score():
    # one query, one hard negative, beta = gamma = 0: loss = log(1 + e^{s_n - s_p})
    neg = Tensor([[0.0, 1.0]])
    cfg = O.ContrastiveConfig(tau=0.5, alpha=1.0, beta=0.0, gamma=0.0)
    losses = []
    for angle in np.linspace(1.5, 0.0, 8):  # positive moves toward the query
        batch = O.ContrastiveBatch(Tensor([[1.0, 0.0]]), Tensor([[math.cos(angle), math.sin(angle)]]), [neg])
        losses.append(O.contrastive_loss(batch, cfg).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 2))
def test_contrastive_nonnegative(seed, n, k):
    rng = np.random.default_rng(seed)
    batch = make_batch(rng, n, 3, k=k, grad=False)
    assert O.contrastive_loss(batch, O.ContrastiveConfig(tau=0.2)).item() >= 0.0


# distillation ---------------------------------------------------------------


def test_kd_hand_example():
    student = Tensor([[1.0, 1.0]])
    loss = O.kd_loss(student, np.array([[2.0, 0.0]]), O.DistillConfig(tau_kd=1.0))
    assert loss.item() == pytest.approx(0.6931, abs=1e-3)
    assert O.teacher_distribution(np.array([[2.0, 0.0]]), np.ones((1, 2), bool), 1.0) == pytest.approx(
        np.array([[0.8808, 0.1192]]), abs=1e-4
    )


def test_kd_fixed_point():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=(4, 6))
    student = Tensor(scores.copy(), requires_grad=True)
    cfg = O.DistillConfig(tau_kd=0.7)
    loss = O.kd_loss(student, scores, cfg)
    T.backward(loss)
    assert abs(loss.item() - O.teacher_entropy(scores, cfg)) < 1e-10
    assert np.max(np.abs(student.grad)) < 1e-10


def test_kd_uniform_limit():
    rng = np.random.default_rng(4)
    m = 5
    loss = O.kd_loss(Tensor(rng.normal(size=(2, m))), rng.normal(size=(2, m)), O.DistillConfig(tau_kd=1e6))
    assert loss.item() == pytest.approx(math.log(m), abs=1e-5)


def test_kd_matches_oracle_and_raw_sum():
    rng = np.random.default_rng(5)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for normalize in (True, False):
        cfg = O.DistillConfig(tau_kd=0.5, normalize=normalize)
        got = O.kd_loss(Tensor(s), t, cfg).item()
        assert abs(got - oracles.kd(s.tolist(), t.tolist(), 0.5, normalize)) < 1e-10


def test_kd_ragged_candidates_ignore_invalid_columns():
    s = np.array([[1.0, 0.5, 9.0], [0.2, -0.1, 0.3]])
    t = np.array([[0.4, 0.9, -7.0], [1.0, 0.0, 0.5]])
    valid = np.array([[True, True, False], [True, True, True]])
    got = O.kd_loss(Tensor(s), t, O.DistillConfig(), valid).item()
    expected = (oracles.kd([s[0, :2].tolist()], [t[0, :2].tolist()]) + oracles.kd([s[1].tolist()], [t[1].tolist()])) / 2
    assert abs(got - expected) < 1e-10


def test_kd_alignment_error():
    with pytest.raises(O.AlignmentError):
        O.kd_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))
    with pytest.raises(O.AlignmentError):
        O.kd_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), valid=np.ones((1, 2), bool), teacher_valid=np.array([[True, False]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_kd_gibbs_inequality(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=(2, 5)) * 3, rng.normal(size=(2, 5)) * 3
    cfg = O.DistillConfig(tau_kd=0.8)
    assert O.kd_loss(Tensor(s), t, cfg).item() >= O.teacher_entropy(t, cfg) - 1e-12


def test_candidate_scores_layout():
    rng = np.random.default_rng(6)
    batch = make_batch(rng, 3, 4, k=1, grad=False)
    scores, valid = O.candidate_scores(batch)
    assert scores.shape == (3, 6)
    assert valid.sum(axis=1).tolist() == [4, 4, 4]  # positive + 1 hard + 2 in-batch
    _, valid_nb = O.candidate_scores(batch, in_batch=False)
    assert valid_nb.sum(axis=1).tolist() == [2, 2, 2]
    dot, _ = O.candidate_scores(batch, similarity="dot")
    np.testing.assert_allclose(dot.data[0, 0], batch.queries.data[0] @ batch.positives.data[0])


def test_kd_gradients_through_candidate_scores():
    rng = np.random.default_rng(7)
    batch = make_batch(rng, 3, 4, k=2)
    teacher = rng.normal(size=(3, 9))

    def fn():
        scores, valid = O.candidate_scores(batch)
        return O.kd_loss(scores, teacher, O.DistillConfig(tau_kd=0.3), valid)

    assert check_gradients(fn, [batch.queries, batch.positives, *batch.negatives]) < 1e-4


# masked LM ------------------------------------------------------------------


def test_mlm_limits():
    logits = np.full((3, 10), -50.0)
    logits[np.arange(3), [1, 4, 7]] = 50.0
    assert O.mlm_loss(Tensor(logits), [1, 4, 7]).item() < 1e-30
    assert O.mlm_loss(Tensor(np.zeros((2, 10))), {0: 3, 1: 9}).item() == pytest.approx(math.log(10), abs=1e-14)


def test_mlm_matches_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(6, 7)) * 2
    labels = {1: 3, 4: 0, 5: 6}
    got = O.mlm_loss(Tensor(logits), labels).item()
    expected = oracles.cross_entropy([logits[r].tolist() for r in sorted(labels)], [labels[r] for r in sorted(labels)])
    assert abs(got - expected) < 1e-10


def test_mlm_empty_labels():
    with pytest.raises(O.EmptyLabelsError):
        O.mlm_loss(Tensor(np.zeros((3, 4))), {})


def test_mlm_and_distill_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    assert check_gradients(lambda: O.mlm_loss(x, {0: 1, 2: 5, 3: 0}), [x]) < 1e-4
    teacher = rng.normal(size=(4, 6))
    assert check_gradients(lambda: O.mlm_distill_loss(x, teacher, tau=2.0), [x]) < 1e-4
    assert O.mlm_distill_loss(Tensor(teacher), teacher).item() == pytest.approx(0.0, abs=1e-14)


# sparsity regularizers ------------------------------------------------------


def test_flops_values():
    assert O.flops_loss(Tensor(np.zeros((3, 4)))).item() == 0.0
    assert O.flops_loss(Tensor([[1.0, 2.0]])).item() == 5.0
    assert O.flops_loss(Tensor([[1.0, 0.0], [0.0, 1.0]])).item() == 0.5
    with pytest.raises(O.EmptyBatchError):
        O.flops_loss(Tensor(np.zeros((0, 3))))


def test_flops_matches_oracle_and_gradient():
    rng = np.random.default_rng(10)
    w = Tensor(rng.uniform(0, 2, size=(5, 6)), requires_grad=True)
    assert abs(O.flops_loss(w).item() - oracles.flops(w.data.tolist())) < 1e-12
    assert check_gradients(lambda: O.flops_loss(w), [w]) < 1e-4


def test_norm_values():
    assert O.norm_loss(Tensor([[-1.0, -2.0], [0.0, -0.5]])).item() == 0.0
    got = O.norm_loss(Tensor([[math.e - 1, math.e**2 - 1]])).item()
    assert got == pytest.approx(3.0, abs=1e-14)
    with pytest.raises(T.EmptySequenceError):
        O.norm_loss(Tensor(np.ones((2, 2))), mask=[False, False])


def test_norm_matches_oracle_and_gradient():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert abs(O.norm_loss(x).item() - oracles.norm(x.data.tolist())) < 1e-12
    assert check_gradients(lambda: O.norm_loss(x), [x]) < 1e-4
    xb = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    per_text = [O.norm_loss(Tensor(xb.data[b]), mask[b]).item() for b in range(2)]
    assert O.norm_loss(xb, mask).item() == pytest.approx(np.mean(per_text), abs=1e-12)
    assert check_gradients(lambda: O.norm_loss(xb, mask), [xb]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_regularizers_nonnegative_and_zero_iff_inactive(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4)) - rng.uniform(0, 3)
    w = T.log1p(T.relu(T.max_over_positions(Tensor(logits))))
    f, nrm = O.flops_loss(T.reshape(w, (1, 4))).item(), O.norm_loss(Tensor(logits)).item()
    assert f >= 0 and nrm >= 0
    active = np.any(logits > 0)
    assert (f > 0) == active and (nrm > 0) == active


def test_sparse_total_loss():
    cfg0 = O.SparseLossConfig()
    assert O.sparse_total_loss(1.25, 2, 3, 4, 5, cfg0).item() == 1.25
    cfg = O.SparseLossConfig(lambda_q=0.5)
    assert O.sparse_total_loss(1.0, 2.0, 0, 0, 0, cfg).item() == 2.0
    rng = np.random.default_rng(12)
    comps = rng.uniform(0, 3, size=5)
    weights = rng.uniform(0, 1, size=4)
    cfg = O.SparseLossConfig(*weights)
    expected = comps[0] + float(np.dot(weights, comps[1:]))
    assert abs(O.sparse_total_loss(*comps, cfg).item() - expected) < 1e-12
    with pytest.raises(O.LossConfigError):
        O.SparseLossConfig(sigma_p=-1.0)


def test_sparse_total_gradient():
    rng = np.random.default_rng(13)
    wq = Tensor(rng.uniform(0.1, 1, size=(3, 5)), requires_grad=True)
    wp = Tensor(rng.uniform(0.1, 1, size=(3, 5)), requires_grad=True)
    cfg = O.SparseLossConfig(0.1, 0.2, 0.3, 0.4)

    def fn():
        scores = T.matmul(wq, T.transpose_last(wp))
        kd = O.kd_loss(scores, rng_teacher, O.DistillConfig())
        return O.sparse_total_loss(
            kd, O.flops_loss(wq), O.flops_loss(wp), O.norm_from_weights(wq), O.norm_from_weights(wp), cfg
        )

    rng_teacher = rng.normal(size=(3, 3))
    assert check_gradients(fn, [wq, wp]) < 1e-4


def test_scale_invariance_of_cosine_losses_and_rankings():
    rng = np.random.default_rng(14)
    b = make_batch(rng, 3, 4, k=1, grad=False)
    s1, _ = O.candidate_scores(b)
    b2 = O.ContrastiveBatch(T.scale(b.queries, 3.5), T.scale(b.positives, 3.5), [T.scale(n, 3.5) for n in b.negatives])
    s2, _ = O.candidate_scores(b2)
    np.testing.assert_array_equal(np.argsort(-s1.data, axis=1), np.argsort(-s2.data, axis=1))
    teacher = rng.normal(size=s1.shape)
    assert O.kd_loss(s1, teacher).item() == pytest.approx(O.kd_loss(s2, teacher).item(), abs=1e-12)
