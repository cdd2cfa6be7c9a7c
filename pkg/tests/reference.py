"""Plainly-written reference attention, used as the independent oracle in tests.

Everything here is deliberately slow and loop-based so it shares no code path
with the vectorized kernels under test. Keep inputs small.
"""

import math

import numpy as np


def naive_gqa(q, k, v, q_pos, k_pos, *, n_kv_heads, scale, q_seq=None, k_seq=None):
    """Nested-loop causal GQA attention.

    q: [Tq, H, D] array-like, k/v: [Tk, Hkv, D]. A key j is admitted for query i
    iff it belongs to the same sequence and k_pos[j] <= q_pos[i]. Returns
    (out [Tq, H, D], lse [Tq, H]) with lse = -inf and a zero row when nothing
    is admitted.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tq, n_heads, head_dim = q.shape
    tk = k.shape[0]
    if q_seq is None:
        q_seq = [0] * tq
    if k_seq is None:
        k_seq = [0] * tk
    out = np.zeros((tq, n_heads, head_dim), dtype=np.float64)
    lse = np.full((tq, n_heads), -math.inf, dtype=np.float64)
    for i in range(tq):
        admitted = [
            j
            for j in range(tk)
            if k_seq[j] == q_seq[i] and k_pos[j] <= q_pos[i]
        ]
        for h in range(n_heads):
            g = (h * n_kv_heads) // n_heads
            scores = []
            for j in admitted:
                s = 0.0
                for d in range(head_dim):
                    s += q[i, h, d] * k[j, g, d]
                scores.append(scale * s)
            if not scores:
                continue
            m = max(scores)
            exps = [math.exp(s - m) for s in scores]
            total = sum(exps)
            lse[i, h] = m + math.log(total)
            for idx, j in enumerate(admitted):
                w = exps[idx] / total
                for d in range(head_dim):
                    out[i, h, d] += w * v[j, g, d]
    return out, lse
