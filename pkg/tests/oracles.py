"""Independent reference computations used by the tests.

Written as plain loops in high-precision arithmetic so they share no code
path with the vectorized implementations they check.
"""

import math

import mpmath as mp

mp.mp.dps = 50


def _cos(u, v):
    dot = mp.fsum(mp.mpf(a) * mp.mpf(b) for a, b in zip(u, v))
    nu = mp.sqrt(mp.fsum(mp.mpf(a) ** 2 for a in u))
    nv = mp.sqrt(mp.fsum(mp.mpf(b) ** 2 for b in v))
    return dot / (nu * nv)


def contrastive(queries, positives, negatives, tau, alpha, beta, gamma, in_batch=True):
    """Loss = -(1/n) sum_i log(e^{s(q_i,p_i0)} / Z_i), one term at a time."""
    n = len(queries)
    tau = mp.mpf(tau)

    def s(u, v):
        return _cos(u, v) / tau

    total = mp.mpf(0)
    for i in range(n):
        neg_passages = list(negatives[i]) if negatives else []
        if in_batch:
            neg_passages += [positives[k] for k in range(n) if k != i]
        numerator = mp.e ** s(queries[i], positives[i])
        z = numerator
        z += alpha * mp.fsum(mp.e ** s(queries[i], p) for p in neg_passages)
        z += beta * mp.fsum(mp.e ** s(queries[i], queries[k]) for k in range(n) if k != i)
        z += gamma * mp.fsum(mp.e ** s(positives[i], p) for p in neg_passages)
        total += mp.log(numerator / z)
    return float(-total / n)


def softmax(xs, tau=1.0):
    xs = [mp.mpf(x) / tau for x in xs]
    m = max(xs)
    es = [mp.e ** (x - m) for x in xs]
    z = mp.fsum(es)
    return [e / z for e in es]


def kd(student_rows, teacher_rows, tau=1.0, normalize=True):
    total = mp.mpf(0)
    for s_row, t_row in zip(student_rows, teacher_rows):
        pt, ps = softmax(t_row, tau), softmax(s_row, tau)
        total -= mp.fsum(a * mp.log(b) for a, b in zip(pt, ps))
    return float(total / len(student_rows) if normalize else total)


def cross_entropy(rows, targets):
    total = mp.mpf(0)
    for row, t in zip(rows, targets):
        total -= mp.log(softmax(row)[t])
    return float(total / len(rows))


def flops(rows):
    n = len(rows)
    return float(mp.fsum((mp.fsum(mp.mpf(r[j]) for r in rows) / n) ** 2 for j in range(len(rows[0]))))


def norm(logit_rows):
    v = len(logit_rows[0])
    return float(mp.fsum(max(mp.log(1 + max(mp.mpf(r[j]), 0)) for r in logit_rows) for j in range(v)))


def dcg(grades):
    return sum((2**g - 1) / math.log2(r + 2) for r, g in enumerate(grades))
