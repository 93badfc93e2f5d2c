"""Particle filters: single level, antithetic coupled, and synchronously coupled.

All three share one engine that can advance several *independent* filters
("groups") at once. Groups never interact: each has its own random stream,
its own normalization and its own resampling decision; they are stacked
only so that the Milstein kernel runs on one large array.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalFailure, WeightCollapse
from .milstein import (
    antithetic_cost,
    antithetic_paths,
    coupled_paths,
    delta,
    draw_grid,
    n_steps,
    pair_cost,
    run_grid,
)
from .resampling import coupled_resample, multinomial_resample
from .streams import as_generator

MODES = {"single": ("fine",), "pair": ("fine", "coarse"), "antithetic": ("fine", "coarse", "anti")}


@dataclass(frozen=True)
class ResamplePolicy:
    """``always`` resamples at every time; ``adaptive`` when min ESS < threshold * N."""

    mode: str = "adaptive"
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("always", "adaptive"):
            raise ValueError(f"resample mode must be 'always' or 'adaptive', got {self.mode!r}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")


class Layout:
    """Offsets of contiguous groups inside a stacked particle array."""

    def __init__(self, sizes: Sequence[int]):
        self.sizes = np.asarray(sizes, dtype=np.intp)
        if self.sizes.ndim != 1 or len(self.sizes) == 0 or np.any(self.sizes < 1):
            raise ValueError(f"group sizes must be positive integers, got {sizes}")
        self.offsets = np.concatenate(([0], np.cumsum(self.sizes)))
        self.starts = self.offsets[:-1]
        self.total = int(self.offsets[-1])

    def __len__(self):
        return len(self.sizes)

    def slice(self, g):
        return slice(self.offsets[g], self.offsets[g + 1])

    def group_of(self, row):
        return int(np.searchsorted(self.offsets, row, side="right") - 1)

    def max(self, a):
        return np.maximum.reduceat(a, self.starts, axis=-1)

    def sum(self, a):
        return np.add.reduceat(a, self.starts, axis=-1)

    def expand(self, a):
        return np.repeat(a, self.sizes, axis=-1)


def group_weights(logw, layout: Layout, time=None, tags=("fine",)):
    """Per-group normalized weights for each row of ``logw`` (shape ``(m, total)``)."""
    m = layout.max(logw)
    if not np.all(np.isfinite(m)):
        j, g = np.argwhere(~np.isfinite(m))[0]
        err = WeightCollapse(f"weight collapse at time {time} in the {tags[j]} ensemble", time, tags[j])
        err.group = int(g)
        raise err
    w = np.exp(logw - layout.expand(m))
    w /= layout.expand(layout.sum(w))
    return w


@dataclass
class Ensemble:
    """Single-level particle cloud at observation time ``time``, before resampling."""

    particles: np.ndarray
    level: int
    time: int
    log_prior: np.ndarray
    log_lik: np.ndarray

    @property
    def log_weights(self):
        return self.log_prior + self.log_lik

    def weights(self):
        return group_weights(self.log_weights[None], Layout([len(self.log_prior)]), self.time)[0]

    def ess(self) -> float:
        w = self.weights()
        return 1.0 / np.dot(w, w)


@dataclass
class CoupledEnsemble:
    """Coupled clouds at time ``time``: ``particles[j]`` for j in ``tags``.

    The clouds are taken after propagation and before reweighting, so
    ``log_prior`` describes the predictor and ``log_lik`` the time-``time``
    likelihood; together they give the filter weights.
    """

    tags: tuple
    particles: list
    level: int
    time: int
    log_prior: np.ndarray  # (m, N)
    log_lik: np.ndarray  # (m, N)

    def __getitem__(self, tag):
        return self.particles[self.tags.index(tag)]

    def log_weights(self, tag):
        j = self.tags.index(tag)
        return self.log_prior[j] + self.log_lik[j]

    def weights(self, tag):
        return group_weights(self.log_weights(tag)[None], Layout([self.log_prior.shape[1]]), self.time)[0]

    def ess(self):
        return {t: 1.0 / np.dot(w, w) for t in self.tags for w in [self.weights(t)]}

    def predictor_average(self, f, tag):
        """Predictor-measure average of ``f`` (prior weights only)."""
        j = self.tags.index(tag)
        return _ratio(self.log_prior[j], f(self.particles[j]))


PredictorSnapshot = CoupledEnsemble


@dataclass
class PFResult:
    snapshots: list
    cost: int
    resampled: list = field(default_factory=list)

    def at(self, k):
        return self.snapshots[k - 1]


def _ratio(logw, values):
    """sum(w * v) / sum(w) from unnormalized log-weights; exact for constant v."""
    m = np.max(logw)
    if not np.isfinite(m):
        raise WeightCollapse("weight collapse while forming an estimate")
    e = np.exp(logw - m)
    return float(np.sum(e * values) / np.sum(e))


def pf_estimate(ensemble: Ensemble, phi) -> float:
    """Self-normalized estimate sum_i W_i phi(x_i) of the filter at the ensemble's time."""
    return _ratio(ensemble.log_weights, phi(ensemble.particles))


def cpf_increment_estimate(snapshot: CoupledEnsemble, phi) -> float:
    """Level-increment estimate: (fine + anti)/2 - coarse, or fine - coarse without anti."""
    est = {t: _ratio(snapshot.log_weights(t), phi(snapshot[t])) for t in snapshot.tags}
    if "anti" in est:
        return 0.5 * (est["fine"] + est["anti"]) - est["coarse"]
    return est["fine"] - est["coarse"]


def run_groups(
    model,
    level: int,
    mode: str,
    sizes: Sequence[int],
    rngs: Sequence,
    data,
    k: int,
    policy: ResamplePolicy,
    observe: Callable,
    literal_h: bool = False,
    grid_hook: Callable | None = None,
):
    """Advance independent filters (one per entry of ``sizes``) up to time ``k``.

    ``observe(t, xs, log_prior, log_lik, layout)`` is called at each time
    t = 1..k after propagation and before resampling. Returns
    ``(steps_per_group, resampled)`` where ``resampled[t-1]`` flags the groups
    resampled after time t.
    """
    tags = MODES[mode]
    if mode != "single" and level < 1:
        raise ValueError("coupled filters need level >= 1")
    if not 1 <= k <= data.n:
        raise ValueError(f"time k={k} outside 1..{data.n}")
    layout = Layout(sizes)
    m = len(tags)
    d = model.dim
    x0 = np.broadcast_to(np.asarray(model.x0, dtype=float), (layout.total, d))
    xs = [x0.copy() for _ in range(m)]

    def propagate(xs):
        grids = [draw_grid(level, (n,), d, r).z for n, r in zip(layout.sizes, rngs)]
        z = grids[0] if len(grids) == 1 else np.concatenate(grids, axis=1)
        if grid_hook is not None:
            z = grid_hook(z)
        try:
            if mode == "single":
                return [run_grid(model, xs[0], z, delta(level), literal_h, level)]
            if mode == "pair":
                return list(coupled_paths(model, level, xs[0], xs[1], z, literal_h))
            out = antithetic_paths(model, level, xs[0], xs[1], xs[2], z, literal_h)
            return [out.fine, out.coarse, out.anti]
        except NumericalFailure as err:
            if getattr(err, "row", None) is not None:
                err.group = layout.group_of(err.row % layout.total)
            raise

    xs = propagate(xs)
    log_prior = np.zeros((m, layout.total))
    resampled = []
    for t in range(1, k + 1):
        y = data.y(t)
        log_lik = np.stack([model.obs_log_density(x, y) for x in xs])
        observe(t, xs, log_prior, log_lik, layout)
        if t == k:
            break
        w = group_weights(log_prior + log_lik, layout, t, tags)
        if policy.mode == "always":
            trigger = np.ones(len(layout), dtype=bool)
        else:
            ess = 1.0 / layout.sum(w * w)
            trigger = ess.min(axis=0) < policy.threshold * layout.sizes
        with np.errstate(divide="ignore"):
            log_prior = np.log(w)
        for g in np.flatnonzero(trigger):
            sl = layout.slice(g)
            if m == 1:
                idx = multinomial_resample(w[0, sl], rngs[g])[None]
            else:
                idx, _ = coupled_resample(list(w[:, sl]), rngs[g])
            idx = idx + sl.start
            for j in range(m):
                xs[j][sl] = xs[j][idx[j]]
            log_prior[:, sl] = 0.0
        resampled.append(trigger)
        xs = propagate(xs)
    if mode == "single":
        per_path = n_steps(level)
    elif mode == "pair":
        per_path = pair_cost(level)
    else:
        per_path = antithetic_cost(level)
    return layout.sizes * (k * per_path), resampled


def _snapshot_observer(store, level, tags, single):
    def observe(t, xs, log_prior, log_lik, layout):
        if single:
            store.append(Ensemble(xs[0].copy(), level, t, log_prior[0].copy(), log_lik[0].copy()))
        else:
            store.append(CoupledEnsemble(tags, [x.copy() for x in xs], level, t, log_prior.copy(), log_lik.copy()))

    return observe


def _run_one(model, level, mode, N, data, policy, rng, k, literal_h, grid_hook=None):
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    k = data.n if k is None else k
    store = []
    obs = _snapshot_observer(store, level, MODES[mode], mode == "single")
    steps, resampled = run_groups(
        model, level, mode, [N], [as_generator(rng)], data, k, policy, obs, literal_h, grid_hook
    )
    return PFResult(store, int(steps[0]), [bool(r[0]) for r in resampled])


def pf_run(model, level, N, data, policy=ResamplePolicy(), rng=None, k=None, literal_h=False) -> PFResult:
    """Bootstrap particle filter at a fixed level, snapshots at t = 1..k."""
    return _run_one(model, level, "single", N, data, policy, rng, k, literal_h)


def cpf_run(model, level, N, data, policy=ResamplePolicy(), rng=None, k=None, literal_h=False, grid_hook=None) -> PFResult:
    """Antithetic coupled particle filter; snapshots carry fine, coarse and anti clouds.

    ``grid_hook`` may rewrite each drawn noise grid before use (test hook).
    """
    if level < 1:
        raise ValueError("coupled particle filter needs level >= 1")
    return _run_one(model, level, "antithetic", N, data, policy, rng, k, literal_h, grid_hook)


def cpf2_run(model, level, N, data, policy=ResamplePolicy(), rng=None, k=None, literal_h=False, grid_hook=None) -> PFResult:
    """Synchronously coupled fine/coarse particle filter without the antithetic partner."""
    if level < 1:
        raise ValueError("coupled particle filter needs level >= 1")
    return _run_one(model, level, "pair", N, data, policy, rng, k, literal_h, grid_hook)


def write_trace(result: PFResult, phi, path):
    """Debug trace: one row per time with ESS values and estimator values."""
    snaps = result.snapshots
    coupled = isinstance(snaps[0], CoupledEnsemble)
    tags = snaps[0].tags if coupled else ("fine",)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"ess_{t}" for t in tags] + [f"est_{t}" for t in tags] + (["increment"] if coupled else []))
        for s in snaps:
            if coupled:
                ess = s.ess()
                est = [_ratio(s.log_weights(t), phi(s[t])) for t in tags]
                w.writerow([s.time] + [ess[t] for t in tags] + est + [cpf_increment_estimate(s, phi)])
            else:
                w.writerow([s.time, s.ess(), pf_estimate(s, phi)])
