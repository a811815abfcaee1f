"""Loop-based reference implementations, written independently of the package code."""
from __future__ import annotations

import math

import numpy as np


def mse(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    tot = 0.0
    for idx in np.ndindex(a.shape):
        tot += (a[idx] - b[idx]) ** 2
    return tot / a.size


def rec_literal(x, seq, mu):
    """x: (S, S); seq: (A, S, S); mu: (A,)."""
    return sum(mse(x, seq[i] * mu[i]) for i in range(len(seq)))


def rec_weighted(x, seq, mu):
    return sum(mu[i] * mse(x, seq[i]) for i in range(len(seq)))


def vox(seq, a, hinge=False):
    A, S1, S2 = seq.shape
    terms = []
    if a > 0:
        lo = np.empty((S1, S2))
        for u in range(S1):
            for v in range(S2):
                lo[u, v] = min(seq[j, u, v] for j in range(a))
        if hinge:
            terms.append(mse(np.maximum(seq[a] - lo, 0), 0 * lo))
        else:
            terms.append(mse(seq[a], lo))
    else:
        terms.append(0.0)
    if a < A - 1:
        hi = np.empty((S1, S2))
        for u in range(S1):
            for v in range(S2):
                hi[u, v] = max(seq[j, u, v] for j in range(a + 1, A))
        if hinge:
            terms.append(mse(np.maximum(hi - seq[a], 0), 0 * hi))
        else:
            terms.append(mse(seq[a], hi))
    else:
        terms.append(0.0)
    return 0.5 * sum(terms)


def reg(seq, a, d, masks, table, mean=0.0, std=1.0, eps=0.1, squared=False):
    """seq: (A, S, S) standardized; masks: (R, S, S) bool; table[q, i, j, d]."""
    A = seq.shape[0]
    R = masks.shape[0]
    img = seq * std + mean
    total = 0.0
    for o in range(A):
        if o == a:
            continue
        i, j = min(o, a), max(o, a)
        for q in range(R):
            s_i = eps + sum(img[i][idx] for idx in zip(*np.nonzero(masks[q])))
            s_j = eps + sum(img[j][idx] for idx in zip(*np.nonzero(masks[q])))
            diff = (table[q, i, j, d] - s_j / s_i) * math.sqrt(masks[q].sum())
            total += diff**2 if squared else diff
    return total / (R * (A - 1))


def bce_pair(p_real, p_fake):
    d = -np.mean(np.log(p_real)) - np.mean(np.log(1 - p_fake))
    g = -np.mean(np.log(p_fake))
    return d, g


def gaussian_kernel_row(n, T, sigma, window):
    w = {}
    for k in range(-window, window + 1):
        if 0 <= n + k < T:
            w[n + k] = math.exp(-k * k / (2 * sigma * sigma))
    z = sum(w.values())
    return {j: v / z for j, v in w.items()}
