"""Compiled inner loops for the ops that BLAS does not cover.

Reductions run serially per output element, in ascending index order, with a
float64 accumulator rounded once on store. Every loop treats rows
independently, so a row's result does not depend on which rows share the call.
Dense matrix products go through numpy's BLAS instead (see ``core``).
"""

import math

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)


@_jit
def rms_norm(x, eps, out):
    m, d = x.shape
    for i in range(m):
        ss = 0.0
        for j in range(d):
            v = np.float64(x[i, j])
            ss += v * v
        inv = 1.0 / math.sqrt(ss / d + eps)
        for j in range(d):
            out[i, j] = np.float64(x[i, j]) * inv


@_jit
def softmax_rows(x, out):
    m, n = x.shape
    for i in range(m):
        mx = -np.inf
        for j in range(n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += math.exp(np.float64(x[i, j]) - mx)
        for j in range(n):
            out[i, j] = math.exp(np.float64(x[i, j]) - mx) / s


@_jit
def causal_attention(q, k, v, n_rows, seq, n_heads, out):
    # q, k, v, out: (n_rows * seq, d). Scores live in one length-seq buffer per query.
    d = q.shape[1]
    hd = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(hd)
    scores = np.empty(seq, dtype=np.float64)
    acc = np.empty(hd, dtype=np.float64)
    kt = np.empty((hd, seq), dtype=np.float64)
    vh = np.empty((seq, hd), dtype=np.float64)
    for b in range(n_rows):
        base = b * seq
        for h in range(n_heads):
            c0 = h * hd
            for j in range(seq):
                for c in range(hd):
                    kt[c, j] = k[base + j, c0 + c]
                    vh[j, c] = v[base + j, c0 + c]
            for i in range(seq):
                qi = base + i
                n = i + 1
                scores[:n] = 0.0
                for c in range(hd):
                    qc = np.float64(q[qi, c0 + c])
                    for j in range(n):
                        scores[j] += qc * kt[c, j]
                mx = -np.inf
                for j in range(n):
                    scores[j] *= inv_sqrt
                    if scores[j] > mx:
                        mx = scores[j]
                tot = 0.0
                for j in range(n):
                    e = math.exp(scores[j] - mx)
                    scores[j] = e
                    tot += e
                acc[:] = 0.0
                for j in range(n):
                    p = scores[j] / tot
                    for c in range(hd):
                        acc[c] += p * vh[j, c]
                for c in range(hd):
                    out[qi, c0 + c] = acc[c]


@_jit
def cross_entropy(logits, labels, out):
    n, vocab = logits.shape
    for i in range(n):
        mx = -np.inf
        for j in range(vocab):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(vocab):
            s += math.exp(np.float64(logits[i, j]) - mx)
        out[i] = math.log(s) + mx - np.float64(logits[i, labels[i]])


@_jit
def row_means(x, groups, out):
    n = x.shape[0]
    per = n // groups
    for g in range(groups):
        s = 0.0
        for i in range(g * per, (g + 1) * per):
            s += np.float64(x[i])
        out[g] = s / per
