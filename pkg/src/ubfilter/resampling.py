"""Multinomial and maximal-coupling-type resampling.

Index arrays are zero-based. Weight vectors are normalized probability
vectors; use :func:`normalize_log_weights` to get one from log-weights.
"""

from __future__ import annotations

import numpy as np

from .errors import WeightCollapse

RESIDUAL_FLOOR = 1e-12


def normalize_log_weights(logw, time=None, ensemble=None):
    """Max-shifted exponentiation and normalization of log-weights."""
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise WeightCollapse(f"weights cannot be normalized at time {time} ({ensemble})", time, ensemble)
    w = np.exp(logw - m)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise WeightCollapse(f"weights cannot be normalized at time {time} ({ensemble})", time, ensemble)
    return w / total


def ess(w) -> float:
    """Effective sample size 1 / sum(w_i^2)."""
    w = np.asarray(w, dtype=float)
    return 1.0 / np.dot(w, w)


def _inverse_cdf(p, u):
    c = np.cumsum(p)
    idx = np.searchsorted(c, u * c[-1], side="right")
    return np.minimum(idx, len(p) - 1)


def multinomial_resample(w, rng, size=None):
    """``size`` (default ``len(w)``) i.i.d. indices drawn from the pmf ``w``."""
    w = np.asarray(w, dtype=float)
    if not w.sum() > 0:
        raise WeightCollapse("all-zero weight vector")
    n = len(w) if size is None else size
    return _inverse_cdf(w, rng.random(n))


def _check_same_length(*ws):
    n = len(ws[0])
    if any(len(w) != n for w in ws):
        raise ValueError("weight vectors must have equal length")
    return n


def _residual_draw(w, m, u):
    r = w - m
    r = np.where(r > 0, r, 0.0)
    if r.sum() < RESIDUAL_FLOOR:
        # unreachable with exact weights; guards rounding when s is within ulps of 1
        return _inverse_cdf(w, u)
    return _inverse_cdf(r, u)


def coupled_resample(ws, rng):
    """Maximal-coupling-type resampling of any number of weight vectors.

    For each particle one uniform decides the branch: with probability
    ``s = sum_j min_m w_m[j]`` a single index is drawn from the normalized
    minimum and shared by every marginal; otherwise each marginal draws
    independently from its normalized residual ``w_m - min``. Each output
    ``a_m`` is marginally distributed as ``w_m``.

    Returns ``(indices, common)`` where ``indices`` has shape ``(len(ws), N)``
    and ``common`` flags the particles that took the shared branch.
    """
    ws = [np.asarray(w, dtype=float) for w in ws]
    n = _check_same_length(*ws)
    m = np.minimum.reduce(ws)
    s = m.sum()
    branch = rng.random(n)
    common = branch < s
    shared = _inverse_cdf(m, rng.random(n)) if s > 0 else np.zeros(n, dtype=np.intp)
    out = np.empty((len(ws), n), dtype=np.intp)
    for j, w in enumerate(ws):
        resid = _residual_draw(w, m, rng.random(n)) if s < 1.0 else shared
        out[j] = np.where(common, shared, resid)
    return out, common


def coupled_resample3(w1, w2, w3, rng):
    """Three-marginal coupled resampling; returns ``(a1, a2, a3)``."""
    idx, _ = coupled_resample((w1, w2, w3), rng)
    return idx[0], idx[1], idx[2]


def coupled_resample2(w1, w2, rng):
    """Two-marginal coupled resampling; returns ``(a1, a2)``."""
    idx, _ = coupled_resample((w1, w2), rng)
    return idx[0], idx[1]
