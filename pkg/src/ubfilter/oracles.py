"""Reference values: exact GBM filter, high-resolution particle filters, closed forms."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .filters import ResamplePolicy, pf_estimate, pf_run
from .streams import generator


@dataclass
class KalmanState:
    """Posterior of U_k = log X_k: mean ``m``, variance ``s2``; ``pred_m``/``pred_s2`` before the update."""

    k: int
    m: float
    s2: float
    pred_m: float
    pred_s2: float

    @property
    def filter_mean(self) -> float:
        return math.exp(self.m + 0.5 * self.s2)


def _gbm_params(params):
    if hasattr(params, "params"):
        params = params.params()
    p = dict(params)
    return float(p["mu"]), float(p["sigma"]), float(p.get("x0", 1.0)), float(p["tau2"])


def kalman_step(state: KalmanState | None, y: float, mu, sigma, tau2, log_x0=0.0) -> KalmanState:
    """One predict/update of the log-space random walk U_k = U_{k-1} + mu - sigma**2/2 + sigma xi."""
    if state is None:
        m, s2, k = log_x0, 0.0, 0
    else:
        m, s2, k = state.m, state.s2, state.k
    pm = m + mu - 0.5 * sigma**2
    ps2 = s2 + sigma**2
    gain = ps2 / (ps2 + tau2)
    return KalmanState(k + 1, pm + gain * (y - pm), (1.0 - gain) * ps2, pm, ps2)


def gbm_exact_filter(params, data, start: KalmanState | None = None) -> list:
    """Exact filter of the GBM model at observation times 1..n.

    ``params`` is a GBM model or a dict with mu, sigma, x0, tau2. Returns one
    :class:`KalmanState` per observation; ``filter_mean`` gives E[X_k | y_1:k].
    ``start`` continues a previous recursion.
    """
    mu, sigma, x0, tau2 = _gbm_params(params)
    if not x0 > 0:
        raise ValueError("GBM filter needs x0 > 0")
    obs = data.observations if hasattr(data, "observations") else data
    obs = np.asarray(obs, dtype=float).reshape(-1)
    out = []
    state = start
    for y in obs:
        state = kalman_step(state, float(y), mu, sigma, tau2, math.log(x0))
        out.append(state)
    return out


def gbm_filter_mean(params, data, k: int) -> float:
    return gbm_exact_filter(params, data.observations[:k] if hasattr(data, "observations") else data[:k])[-1].filter_mean


def gbm_moments(params, t: float):
    """Mean and variance of X_t for dX = mu X dt + sigma X dW."""
    if hasattr(params, "params"):
        params = params.params()
    mu, sigma, x0 = float(params["mu"]), float(params["sigma"]), float(params.get("x0", 1.0))
    mean = x0 * math.exp(mu * t)
    var = x0**2 * math.exp(2 * mu * t) * math.expm1(sigma**2 * t)
    return mean, var


@dataclass
class ReferenceEstimate:
    mean: float
    stderr: float
    values: list
    settings: dict


def dataset_hash(data) -> str:
    return hashlib.sha256(np.ascontiguousarray(data.observations, dtype=float).tobytes()).hexdigest()[:16]


def reference_pf(model, data, k, level=9, N=100_000, reps=20, seed=0, phi=None, cache_dir=None,
                 policy=ResamplePolicy()) -> ReferenceEstimate:
    """Average of ``reps`` independent bootstrap filters at a fine level.

    Results are cached as JSON under ``cache_dir`` keyed by the model, the
    dataset hash and all settings.
    """
    from .models import TestFunction

    phi = TestFunction() if phi is None else phi
    settings = {
        "model": model.spec(),
        "data": dataset_hash(data),
        "k": int(k),
        "level": int(level),
        "N": int(N),
        "reps": int(reps),
        "seed": int(seed),
        "phi": phi.tag,
        "policy": [policy.mode, policy.threshold],
    }
    key = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:20]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"refpf-{key}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return ReferenceEstimate(d["mean"], d["stderr"], d["values"], d["settings"])
    vals = []
    for r in range(reps):
        res = pf_run(model, level, N, data, policy, generator(seed, 7919, r), k=k)
        vals.append(pf_estimate(res.at(k), phi))
    v = np.array(vals)
    out = ReferenceEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("nan"), vals, settings)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"mean": out.mean, "stderr": out.stderr, "values": vals, "settings": settings}, indent=2))
        tmp.replace(path)
    return out


def enumerate_coupled_resampling(*ws) -> dict:
    """Exact joint pmf of one particle's ancestor indices under coupled resampling.

    Brute force over all index tuples: common branch with mass s = sum min_m w_m
    placing min/s on the diagonal, plus (1 - s) times the product of the
    normalized residuals. Only meant for N <= 4.
    """
    ws = [[float(v) for v in w] for w in ws]
    n = len(ws[0])
    if n > 4:
        raise ValueError("enumeration is limited to N <= 4")
    mins = [min(w[j] for w in ws) for j in range(n)]
    s = sum(mins)
    resid = []
    for w in ws:
        r = [max(w[j] - mins[j], 0.0) for j in range(n)]
        tot = sum(r)
        resid.append([x / tot for x in r] if tot > 0 else [0.0] * n)
    pmf = {}
    for idx in itertools.product(range(n), repeat=len(ws)):
        p = 0.0
        if len(set(idx)) == 1:
            p += mins[idx[0]]
        if s < 1:
            prod = 1.0 - s
            for m, j in enumerate(idx):
                prod *= resid[m][j]
            p += prod
        if p > 0:
            pmf[idx] = p
    return pmf


def marginals(pmf: dict, n: int, m: int):
    out = np.zeros((m, n))
    for idx, p in pmf.items():
        for j, a in enumerate(idx):
            out[j, a] += p
    return out
