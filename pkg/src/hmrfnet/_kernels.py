"""Compiled single-site update loops for specs made of static and triangle features.

For such specs the log-odds of ``x_i = 1`` given the rest is

    a_i = field_i + ext_i + coupling * cn_i(x)

with ``field_i = beta . f_static_i - ||beta||^2 D_i``, ``coupling = 3 beta_cn``
and ``ext_i`` the (tempered) emission log-likelihood ratio of edge ``i``.

Random-number layout per chain and sweep is shared with the pure-Python
fallback in :mod:`hmrfnet.sampler`: Gibbs consumes ``2d`` uniforms (``d``
permutation keys, then one acceptance uniform per visited site); Metropolis
consumes ``2`` uniforms per proposal.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _logit(x, i, field, ext_row, coupling, tri):
    a = field[i] + ext_row[i]
    if coupling != 0.0:
        cn = 0
        for w in range(tri.shape[1]):
            cn += x[tri[i, w, 0]] & x[tri[i, w, 1]]
        a += coupling * cn
    return a


@njit(cache=True, inline="always")
def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@njit(cache=True)
def gibbs_block(X, field, ext, coupling, tri, R, slot, out):
    """Run ``R.shape[1]`` random-scan sweeps on every chain in ``X`` (in place).

    ``slot[b] >= 0`` copies the state after sweep ``b`` into ``out[:, slot[b]]``.
    """
    C, d = X.shape
    B = R.shape[1]
    for c in range(C):
        x = X[c]
        ext_row = ext[c]
        for b in range(B):
            order = np.argsort(R[c, b, :d])
            for k in range(d):
                i = order[k]
                p = _sigmoid(_logit(x, i, field, ext_row, coupling, tri))
                x[i] = 1 if R[c, b, d + k] < p else 0
            if slot[b] >= 0:
                out[c, slot[b]] = x


@njit(cache=True)
def metropolis_block(X, field, ext, coupling, tri, R, accepted, slot, out):
    """Single-flip Metropolis; ``R[c, b]`` holds ``2d`` uniforms for one sweep of ``d`` proposals."""
    C, d = X.shape
    B = R.shape[1]
    for c in range(C):
        x = X[c]
        ext_row = ext[c]
        for b in range(B):
            for k in range(d):
                i = min(int(R[c, b, 2 * k] * d), d - 1)
                a = _logit(x, i, field, ext_row, coupling, tri)
                log_ratio = a if x[i] == 0 else -a
                if log_ratio >= 0.0 or R[c, b, 2 * k + 1] < math.exp(log_ratio):
                    x[i] = 1 - x[i]
                    accepted[c] += 1
            if slot[b] >= 0:
                out[c, slot[b]] = x


@njit(cache=True)
def triangle_counts(X, tri):
    """Common-neighbour counts for every edge of every configuration: ``(S, d)``."""
    S, d = X.shape
    out = np.zeros((S, d), dtype=np.int64)
    for s in range(S):
        for i in range(d):
            cn = 0
            for w in range(tri.shape[1]):
                cn += X[s, tri[i, w, 0]] & X[s, tri[i, w, 1]]
            out[s, i] = cn
    return out
