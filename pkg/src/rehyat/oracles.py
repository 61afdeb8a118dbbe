"""Slow, loop-level reference evaluators.

Nothing here calls the vectorized kernels; each function re-derives its
result one scalar at a time so it can serve as an independent check.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import FeatureMap


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i][p]) * float(b[p][j])
            out[i, j] = acc
    return out


def _dot(u, w) -> float:
    return math.fsum(float(a) * float(b) for a, b in zip(u, w))


def phi_row(fm: FeatureMap, x) -> list[float]:
    """Feature map of one row, evaluated scalar by scalar."""
    acts = {"identity": lambda z: z, "tanh": math.tanh, "softplus": lambda z: math.log1p(math.exp(-abs(z))) + max(z, 0.0)}
    act = acts[fm.activation]
    w1, b1, w2, b2 = (np.asarray(p, dtype=np.float64) for p in (fm.w1, fm.b1, fm.w2, fm.b2))
    hidden = [act(_dot(x, w1[:, c]) + b1[c]) for c in range(w1.shape[1])]
    emb = [_dot(hidden, w2[:, c]) + b2[c] for c in range(w2.shape[1])]
    if fm.nonneg_mode == "shifted-elu":
        emb = [1.0 + e if e >= 0 else math.exp(e) for e in emb]
    width = len(emb) // fm.degree
    return [e ** (c // width + 1) for c, e in enumerate(emb)]


def softmax_attention_loop(q, k, v, scale: float | None = None) -> np.ndarray:
    """Per-token weighted average with ``exp(q_i . k_j * scale)`` weights."""
    n, d = len(q), len(q[0])
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    out = np.zeros((n, len(v[0])))
    for i in range(n):
        logits = [_dot(q[i], k[j]) * scale for j in range(len(k))]
        m = max(logits)
        w = [math.exp(l - m) for l in logits]
        den = math.fsum(w)
        for c in range(len(v[0])):
            out[i, c] = math.fsum(w[j] * float(v[j][c]) for j in range(len(k))) / den
    return out


def linear_attention_loop(q, k, v, phi_q: FeatureMap, phi_k: FeatureMap) -> np.ndarray:
    """Per-pair kernel weights ``phi_q(q_i) . phi_k(k_j)``, normalized per row."""
    fq = [phi_row(phi_q, r) for r in q]
    fk = [phi_row(phi_k, r) for r in k]
    out = np.zeros((len(q), len(v[0])))
    for i in range(len(q)):
        w = [_dot(fq[i], fk[j]) for j in range(len(k))]
        den = math.fsum(w)
        for c in range(len(v[0])):
            out[i, c] = math.fsum(w[j] * float(v[j][c]) for j in range(len(k))) / den
    return out


def hybrid_chunk_loop(q, k, v, phi_q: FeatureMap, phi_k: FeatureMap, rows: tuple[int, int],
                      softmax_set: set[int], linear_set: set[int], scale: float | None = None) -> np.ndarray:
    """Mixed-kernel evaluator over every (query, key) pair of one chunk.

    Keys in ``softmax_set`` get ``exp(logit - c_i)`` with ``c_i`` the row
    maximum over that set; keys in ``linear_set`` get ``phi_q(q_i).phi_k(k_j)``.
    Numerator and denominator are accumulated jointly.
    """
    d = len(q[0])
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    lo, hi = rows
    out = np.zeros((hi - lo, len(v[0])))
    fk = {j: phi_row(phi_k, k[j]) for j in linear_set}
    for i in range(lo, hi):
        fqi = phi_row(phi_q, q[i])
        logits = {j: _dot(q[i], k[j]) * scale for j in softmax_set}
        c = max(logits.values()) if logits else 0.0
        weights = {}
        for j in range(len(k)):
            if j in softmax_set:
                weights[j] = math.exp(logits[j] - c)
            elif j in linear_set:
                weights[j] = _dot(fqi, fk[j])
        den = math.fsum(weights.values())
        for col in range(len(v[0])):
            out[i - lo, col] = math.fsum(w * float(v[j][col]) for j, w in weights.items()) / den
    return out


def causal_sets(T: int, H: int, W: int, T_c: int, T_o: int, t: int, causal: bool) -> tuple[set[int], set[int]]:
    """Token sets of chunk ``t`` by enumeration of the membership predicates."""
    hw = H * W
    n = T * hw
    n_chunk = T_c * hw
    s_lo = max(t * n_chunk - T_o * hw, 0)
    s_hi = (t + 1) * n_chunk
    softmax_set = {j for j in range(n) if s_lo <= j < s_hi}
    if causal:
        linear_set = {j for j in range(n) if j < s_lo}
    else:
        linear_set = {j for j in range(n) if j not in softmax_set}
    return softmax_set, linear_set
