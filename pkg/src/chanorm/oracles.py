"""Element-by-element reference implementations of the normalization layers.

These are written as plain Python loops over b, c, d so that they share no
code path with the vectorized layers they are used to check.
"""
from __future__ import annotations

import math

import numpy as np


def _norm_row(row, eps_norm):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    sigma = math.sqrt(var + eps_norm)
    return [(v - mu) / sigma for v in row]


def _cos(u, v, eps=1e-8):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv + eps)


def _softmax(vals, tau):
    m = max(vals)
    e = [math.exp((v - m) / tau) for v in vals]
    s = sum(e)
    return [x / s for x in e]


def _sim(u, v, metric):
    if metric == "cosine":
        return _cos(u, v)
    if metric == "neg_l1":
        return -sum(abs(a - b) for a, b in zip(u, v))
    if metric == "neg_l2":
        return -math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))
    raise ValueError(metric)


def ln_loop(z, alpha, beta, eps_norm=1e-5):
    z = np.asarray(z).tolist()
    B, C, D = len(z), len(z[0]), len(z[0][0])
    out = np.zeros((B, C, D))
    for b in range(B):
        for c in range(C):
            n = _norm_row(z[b][c], eps_norm)
            for d in range(D):
                out[b, c, d] = alpha[d] * n[d] + beta[d]
    return out


def in_loop(z, alpha, beta, eps_norm=1e-5):
    z = np.asarray(z).tolist()
    B, C, D = len(z), len(z[0]), len(z[0][0])
    out = np.zeros((B, C, D))
    for b in range(B):
        for d in range(D):
            n = _norm_row([z[b][c][d] for c in range(C)], eps_norm)
            for c in range(C):
                out[b, c, d] = alpha[d] * n[c] + beta[d]
    return out


def cn_loop(z, alpha, beta, eps_norm=1e-5):
    """Channel normalization, one affine row per channel."""
    z = np.asarray(z).tolist()
    B, C, D = len(z), len(z[0]), len(z[0][0])
    out = np.zeros((B, C, D))
    for b in range(B):
        for c in range(C):
            n = _norm_row(z[b][c], eps_norm)
            for d in range(D):
                out[b, c, d] = alpha[c][d] * n[d] + beta[c][d]
    return out


def channel_similarity_loop(basis, tau, metric="cosine"):
    basis = np.asarray(basis).tolist()
    B, C = len(basis), len(basis[0])
    w = np.zeros((B, C, C))
    for b in range(B):
        for c1 in range(C):
            raw = [_sim(basis[b][c1], basis[b][c2], metric) for c2 in range(C)]
            w[b, c1] = _softmax(raw, tau)
    return w


def acn_loop(z, alpha_g, alpha_l, beta_g, beta_l, tau, metric="cosine", basis=None, eps_norm=1e-5):
    """Adaptive channel normalization; ``basis`` defaults to ``z``."""
    s_hat = channel_similarity_loop(z if basis is None else basis, tau, metric)
    z = np.asarray(z).tolist()
    B, C, D = len(z), len(z[0]), len(z[0][0])
    out = np.zeros((B, C, D))
    for b in range(B):
        for c in range(C):
            n = _norm_row(z[b][c], eps_norm)
            for d in range(D):
                a = alpha_g[c][d] * sum(s_hat[b, c, i] * alpha_l[i][d] for i in range(C))
                be = beta_g[c][d] * sum(s_hat[b, c, i] * beta_l[i][d] for i in range(C))
                out[b, c, d] = a * n[d] + be
    return out


def pcn_loop(z, x, alpha_p, beta_p, proj_w, proj_b, tau, eps_norm=1e-5):
    """Prototypical channel normalization; ``x`` is ``[B, L, C]``."""
    z = np.asarray(z).tolist()
    x = np.asarray(x).tolist()
    alpha_p = np.asarray(alpha_p).tolist()
    beta_p = np.asarray(beta_p).tolist()
    B, C, D = len(z), len(z[0]), len(z[0][0])
    L = len(x[0])
    K = len(alpha_p)
    out = np.zeros((B, C, D))
    for b in range(B):
        for c in range(C):
            h = [proj_b[d] + sum(x[b][t][c] * proj_w[t][d] for t in range(L)) for d in range(D)]
            s_a = _softmax([_cos(h, alpha_p[k]) for k in range(K)], tau)
            s_b = _softmax([_cos(h, beta_p[k]) for k in range(K)], tau)
            n = _norm_row(z[b][c], eps_norm)
            for d in range(D):
                a = sum(s_a[i] * alpha_p[i][d] for i in range(K))
                be = sum(s_b[i] * beta_p[i][d] for i in range(K))
                out[b, c, d] = a * n[d] + be
    return out
