"""Training objectives.

Contrastive loss with the bidirectional partition term (query-passage,
query-query and passage-passage similarities), score-distribution
distillation, masked-LM cross-entropy, and the FLOPS / NORM sparsity
regularizers combined into the sparse training objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

_NEG = -1e9


class EmptyBatchError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class EmptyLabelsError(ValueError):
    pass


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature and switches for the three partition-function terms.

    ``alpha`` weighs query vs negative passages, ``beta`` query vs other
    queries, ``gamma`` positive vs negative passages. ``in_batch`` adds the
    other queries' positives to the negative passages of each query.
    """

    tau: float = 0.05
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    in_batch: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise LossConfigError("tau must be positive")
        for name in ("alpha", "beta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise LossConfigError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class DistillConfig:
    tau_kd: float = 1.0
    normalize: bool = True  # divide by the number of queries
    in_batch: bool = True

    def __post_init__(self):
        if not self.tau_kd > 0:
            raise LossConfigError("tau_kd must be positive")


@dataclass(frozen=True)
class SparseLossConfig:
    lambda_q: float = 0.0
    lambda_p: float = 0.0
    sigma_q: float = 0.0
    sigma_p: float = 0.0

    def __post_init__(self):
        for name in ("lambda_q", "lambda_p", "sigma_q", "sigma_p"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"{name} must be non-negative")


@dataclass
class ContrastiveBatch:
    queries: Tensor  # [n, d]
    positives: Tensor  # [n, d]
    negatives: Sequence[Tensor | None] | None = None  # per query [k_i, d]

    def __post_init__(self):
        n = self.queries.shape[0] if self.queries.ndim == 2 else 0
        if n == 0:
            raise EmptyBatchError("contrastive batch has no queries")
        if self.positives.shape != self.queries.shape:
            raise AlignmentError("queries and positives must have the same shape")
        if self.negatives is not None and len(self.negatives) != n:
            raise AlignmentError("need one (possibly empty) negative block per query")

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    def hard_negatives(self) -> tuple[Tensor | None, np.ndarray]:
        """All hard negatives stacked, plus the owning query index of each row."""
        blocks, owners = [], []
        for i, neg in enumerate(self.negatives or []):
            if neg is None or neg.shape[0] == 0:
                continue
            if neg.ndim != 2 or neg.shape[1] != self.queries.shape[1]:
                raise AlignmentError(f"negatives for query {i} have shape {neg.shape}")
            blocks.append(neg)
            owners.extend([i] * neg.shape[0])
        if not blocks:
            return None, np.zeros(0, dtype=np.int64)
        stacked = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
        return stacked, np.array(owners, dtype=np.int64)


def passage_pool(batch: ContrastiveBatch) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Stack positives and hard negatives; return (pool, positive mask, negative mask).

    Row ``i`` of each ``[n, n + K]`` mask marks the pool entry that is query
    ``i``'s positive, and the entries that count as its negative passages.
    """
    n = batch.n
    hard, owners = batch.hard_negatives()
    pool = batch.positives if hard is None else T.concat([batch.positives, hard], axis=0)
    k = owners.size
    pos = np.zeros((n, n + k), dtype=bool)
    pos[np.arange(n), np.arange(n)] = True
    neg = np.zeros((n, n + k), dtype=bool)
    neg[owners, n + np.arange(k)] = True
    return pool, pos, neg


def _weighted_logsumexp_rows(logits: Tensor, weights: np.ndarray) -> Tensor:
    """log sum_c w_c exp(x_c) per row; entries with zero weight are excluded."""
    active = weights > 0
    if not np.all(active.any(axis=1)):
        raise EmptyBatchError("a row has no active terms")
    masked = T.add_constant(logits, np.where(active, 0.0, _NEG))
    shift = masked.data.max(axis=1, keepdims=True)  # constant shift: gradient unaffected
    shifted = T.add_constant(masked, -shift)
    total = T.tsum(T.mul(T.exp(shifted), Tensor(np.where(active, weights, 0.0))), axis=1)
    return T.add_constant(T.log(total), shift[:, 0])


def contrastive_loss(batch: ContrastiveBatch, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """-(1/n) sum_i log(exp(s(q_i, p_i0)) / Z_i).

    Z_i = exp(s(q_i, p_i0)) + alpha * sum over negative passages of exp(s(q_i, p))
        + beta * sum over other queries of exp(s(q_i, q_i'))
        + gamma * sum over negative passages of exp(s(p_i0, p)),
    with s the cosine similarity divided by tau.
    """
    n = batch.n
    pool, pos, neg = passage_pool(batch)
    if cfg.in_batch:
        neg[:, :n] = ~np.eye(n, dtype=bool)
    s_qp = T.cosine_matrix(batch.queries, pool, cfg.tau)
    s_qq = T.cosine_matrix(batch.queries, batch.queries, cfg.tau)
    s_pp = T.cosine_matrix(batch.positives, pool, cfg.tau)
    logits = T.concat([s_qp, s_qq, s_pp], axis=1)
    off_diag = ~np.eye(n, dtype=bool)
    weights = np.concatenate(
        [pos + cfg.alpha * neg, cfg.beta * off_diag, cfg.gamma * neg], axis=1
    ).astype(np.float64)
    log_z = _weighted_logsumexp_rows(logits, weights)
    positive = T.take(s_qp, (np.arange(n), np.arange(n)))
    return T.scale(T.tsum(T.sub(log_z, positive)), 1.0 / n)


def candidate_scores(
    batch: ContrastiveBatch, similarity: str = "cosine", in_batch: bool = True
) -> tuple[Tensor, np.ndarray]:
    """Unscaled scores of each query against its candidate set.

    Candidates are the positive, the hard negatives and (with ``in_batch``)
    the other queries' positives, i.e. the partition function with the
    query-query and passage-passage terms switched off. Returns ``[n, n + K]``
    scores and the boolean validity mask; column ``i`` is query ``i``'s positive.
    """
    n = batch.n
    pool, pos, neg = passage_pool(batch)
    if in_batch:
        neg[:, :n] = ~np.eye(n, dtype=bool)
    if similarity == "cosine":
        scores = T.cosine_matrix(batch.queries, pool, 1.0)
    elif similarity == "dot":
        scores = T.matmul(batch.queries, T.transpose_last(pool))
    else:
        raise LossConfigError(f"unknown similarity {similarity!r}")
    return scores, pos | neg


def teacher_distribution(teacher_scores, valid: np.ndarray, tau: float) -> np.ndarray:
    s = np.where(valid, np.asarray(teacher_scores, dtype=np.float64) / tau, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss(
    student_scores: Tensor,
    teacher_scores,
    cfg: DistillConfig = DistillConfig(),
    valid: np.ndarray | None = None,
    teacher_valid: np.ndarray | None = None,
) -> Tensor:
    """Cross-entropy between teacher and student softmax score distributions.

    Both score matrices are ``[n, m]`` over the same candidates; the teacher
    side is treated as constant. ``valid`` masks ragged candidate sets.
    """
    teacher = teacher_scores.data if isinstance(teacher_scores, Tensor) else np.asarray(teacher_scores, dtype=np.float64)
    if teacher.shape != student_scores.shape or student_scores.ndim != 2:
        raise AlignmentError(f"teacher scores {teacher.shape} vs student scores {student_scores.shape}")
    n = student_scores.shape[0]
    if n == 0:
        raise EmptyBatchError("no queries to distill")
    valid = np.ones(teacher.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if teacher_valid is not None and not np.array_equal(np.asarray(teacher_valid, dtype=bool), valid):
        raise AlignmentError("teacher and student candidate sets differ")
    p_t = teacher_distribution(teacher, valid, cfg.tau_kd)
    log_p_s = T.log_softmax_rows(T.add_constant(T.scale(student_scores, 1.0 / cfg.tau_kd), np.where(valid, 0.0, _NEG)))
    total = T.neg(T.tsum(T.mul(log_p_s, Tensor(p_t))))
    return T.scale(total, 1.0 / n) if cfg.normalize else total


def teacher_entropy(teacher_scores, cfg: DistillConfig = DistillConfig(), valid: np.ndarray | None = None) -> float:
    teacher = np.asarray(teacher_scores, dtype=np.float64)
    valid = np.ones(teacher.shape, dtype=bool) if valid is None else valid
    p = teacher_distribution(teacher, valid, cfg.tau_kd)
    logp = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logp).sum()
    return float(h / teacher.shape[0] if cfg.normalize else h)


def _label_rows(logits: Tensor, labels) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(labels, Mapping):
        rows = np.array(sorted(labels), dtype=np.int64)
        targets = np.array([labels[r] for r in rows], dtype=np.int64)
    else:
        targets = np.asarray(labels, dtype=np.int64)
        rows = np.arange(targets.size)
        if targets.size != logits.shape[0]:
            raise AlignmentError("one target per logit row is required")
    return rows, targets


def mlm_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy at labelled positions.

    ``labels`` is either ``{position: original_id}`` over the rows of
    ``logits`` or a target array with one entry per row.
    """
    if logits.ndim != 2:
        raise AlignmentError("mlm_loss expects [positions, vocab] logits")
    rows, targets = _label_rows(logits, labels)
    if rows.size == 0:
        raise EmptyLabelsError("no labelled positions")
    if not np.array_equal(rows, np.arange(logits.shape[0])):
        logits = T.take(logits, rows)
    logp = T.log_softmax_rows(logits)
    picked = T.take(logp, (np.arange(rows.size), targets))
    return T.scale(T.tsum(picked), -1.0 / rows.size)


def mlm_distill_loss(student_logits: Tensor, teacher_logits, tau: float = 1.0) -> Tensor:
    """Mean KL(teacher || student) over rows of vocabulary logits."""
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if teacher.shape != student_logits.shape:
        raise AlignmentError("teacher and student MLM logits differ in shape")
    if teacher.shape[0] == 0:
        raise EmptyLabelsError("no positions to distill")
    p_t = teacher_distribution(teacher, np.ones(teacher.shape, dtype=bool), tau)
    log_p_t = np.log(np.where(p_t > 0, p_t, 1.0))
    log_p_s = T.log_softmax_rows(T.scale(student_logits, 1.0 / tau))
    kl = T.sub(Tensor((p_t * log_p_t).sum()), T.tsum(T.mul(log_p_s, Tensor(p_t))))
    return T.scale(kl, 1.0 / teacher.shape[0])


def flops_loss(weights: Tensor) -> Tensor:
    """sum_j (mean_i w_ij)^2 over a batch of N term-weight rows."""
    if weights.ndim != 2 or weights.shape[0] == 0:
        raise EmptyBatchError("flops_loss needs a non-empty [N, V] weight matrix")
    avg = T.mean(weights, axis=0)
    return T.tsum(T.mul(avg, avg))


def norm_loss(logits: Tensor, mask=None) -> Tensor:
    """L1 norm of the max-pooled log(1 + relu) term weights.

    ``logits`` is ``[L, V]`` (one text) or ``[B, L, V]`` (mean over texts).
    """
    pooled = T.log1p(T.relu(T.max_over_positions(logits, mask)))
    if logits.ndim == 2:
        return T.tsum(pooled)
    return norm_from_weights(pooled)


def norm_from_weights(weights: Tensor) -> Tensor:
    """Batch mean of row L1 norms of already-pooled term weights."""
    if weights.ndim != 2 or weights.shape[0] == 0:
        raise EmptyBatchError("norm loss needs a non-empty [N, V] weight matrix")
    return T.scale(T.tsum(weights), 1.0 / weights.shape[0])


def sparse_total_loss(kd, flops_q, flops_p, norm_q, norm_p, cfg: SparseLossConfig) -> Tensor:
    """kd + lambda_q*flops_q + lambda_p*flops_p + sigma_q*norm_q + sigma_p*norm_p."""
    if min(cfg.lambda_q, cfg.lambda_p, cfg.sigma_q, cfg.sigma_p) < 0:
        raise LossConfigError("regularization weights must be non-negative")
    total = T.as_tensor(kd)
    for weight, term in (
        (cfg.lambda_q, flops_q),
        (cfg.lambda_p, flops_p),
        (cfg.sigma_q, norm_q),
        (cfg.sigma_p, norm_p),
    ):
        total = T.add(total, T.scale(T.as_tensor(term), weight))
    return total
