"""Brute-force reference implementations written with scalar loops.

They share no code with the package so they can serve as independent oracles.
"""

import math


def softmax_over_k(P, tau):
    """P is a K x I nested list; normalize each channel i across the K rows."""
    K, I = len(P), len(P[0])
    out = [[0.0] * I for _ in range(K)]
    for i in range(I):
        col = [P[k][i] / tau for k in range(K)]
        m = max(col)
        z = sum(math.exp(c - m) for c in col)
        for k in range(K):
            out[k][i] = math.exp(col[k] - m) / z
    return out


def teacher_softmax(Q, xi, tau):
    K, I = len(Q), len(Q[0])
    return softmax_over_k([[Q[k][i] - xi[k][i] for i in range(I)] for k in range(K)], tau)


def cross_entropy_sum(q_hat, p_hat):
    return -sum(q * math.log(p) for qrow, prow in zip(q_hat, p_hat) for q, p in zip(qrow, prow))


def mnm_sum(logits, targets):
    """Sum over rows with a nonzero target of -sum_d t_d log softmax(logits)_d."""
    total = 0.0
    for row, t in zip(logits, targets):
        if not any(t):
            continue
        z = sum(math.exp(v) for v in row)
        total -= sum(td * math.log(math.exp(v) / z) for v, td in zip(row, t))
    return total


def center_step(xi, batch, beta):
    K, I, B = len(xi), len(xi[0]), len(batch)
    return [[beta * xi[k][i] + (1 - beta) * sum(q[k][i] for q in batch) / B for i in range(I)] for k in range(K)]


def ema(teacher, student, lam):
    return [lam * t + (1 - lam) * s for t, s in zip(teacher, student)]


def kl_rows(u, v):
    total = 0.0
    for ru, rv in zip(u, v):
        zu = sum(math.exp(x) for x in ru)
        zv = sum(math.exp(x) for x in rv)
        for a, b in zip(ru, rv):
            pu, pv = math.exp(a) / zu, math.exp(b) / zv
            total += pu * math.log(pu / pv)
    return total
