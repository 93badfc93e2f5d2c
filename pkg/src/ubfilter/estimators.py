"""Doubly randomized single-term estimators of the filter, and their baselines.

A replicate draws a level ``l`` from ``pmf_L`` and a sample-size index ``p``
from ``pmf_P``. It then runs ``p + 1`` independent (coupled) particle filters
with ``N_0, N_1 - N_0, ..., N_p - N_{p-1}`` particles, pools their predictor
averages into estimates at ``N_p`` and ``N_{p-1}`` particles, and returns

    xi = (estimate(N_p) - estimate(N_{p-1})) / pmf_P(p)

(with the ``N_{-1}`` estimate taken as 0). The filter estimate is the mean of
``xi / pmf_L(l)`` over replicates.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, NumericalFailure, WeightCollapse
from .filters import MODES, ResamplePolicy, run_groups
from .streams import as_generator, generator, seed_tag

METHODS = ("ub-amlpf", "ub-mlpf")
CHUNK = 32
# max noise-grid entries (2**level * particles) advanced in one batch
GRID_BUDGET = 1 << 22


class Pmf:
    """Probability mass function on ``start, start + 1, ...`` (optionally truncated at ``stop``).

    Unbounded supports are tabulated until the tail mass drops below 1e-17.
    """

    def __init__(self, weight, start=0, stop=None, name=""):
        self.start = int(start)
        self.stop = None if stop is None else int(stop)
        self.name = name
        if self.stop is not None:
            if self.stop < self.start:
                raise ConfigError(f"empty support {self.start}..{self.stop}")
            idx = np.arange(self.start, self.stop + 1)
            w = np.array([weight(int(i)) for i in idx], dtype=float)
        else:
            vals = []
            i = self.start
            while True:
                v = float(weight(i))
                vals.append(v)
                if (i - self.start > 8 and v < 1e-19 * vals[0]) or len(vals) > 4000:
                    break
                i += 1
            w = np.array(vals)
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ConfigError(f"pmf {name!r} must be strictly positive on its support")
        self.probs = w / w.sum()
        self._cdf = np.cumsum(self.probs)

    def __call__(self, i) -> float:
        j = int(i) - self.start
        if j < 0 or j >= len(self.probs):
            if self.stop is None and j >= 0:
                return 0.0
            raise ValueError(f"{i} outside the support of pmf {self.name!r}")
        return float(self.probs[j])

    @property
    def support(self):
        return np.arange(self.start, self.start + len(self.probs))

    def sample(self, rng) -> int:
        j = int(np.searchsorted(self._cdf, rng.random() * self._cdf[-1], side="right"))
        return self.start + min(j, len(self.probs) - 1)


def geometric_pmf(rate, start=0, stop=None, name=""):
    """pmf(i) proportional to 2**(-rate * i)."""
    return Pmf(lambda i: 2.0 ** (-rate * i), start, stop, name)


def log_corrected_pmf(start=0, stop=None, name=""):
    """pmf(i) proportional to 2**-i (i + 1) log2(i + 2)**2.

    This is the normalizable reading of the heavier-tailed level/sample-size
    pmf suggested for the untruncated estimator.
    """
    return Pmf(lambda i: 2.0 ** (-i) * (i + 1) * math.log2(i + 2) ** 2, start, stop, name)


@dataclass(frozen=True)
class RandomizationConfig:
    """All knobs of the randomized estimator.

    ``l_max``/``p_max`` of ``None`` mean untruncated supports. ``tau`` is the
    decay of the geometric level pmf; ``pmf_kind="log-corrected"`` switches
    both pmfs to the 2**-i (i + 1) log2(i + 2)**2 family.
    """

    base_level: int = 0
    l_max: int | None = 5
    p_max: int | None = 5
    tau: float = 1.0
    pmf_kind: str = "geometric"
    n0: int = 64
    m: int = 100
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.base_level < 0:
            raise ConfigError("base_level must be >= 0")
        if self.l_max is not None and self.l_max < self.base_level:
            raise ConfigError("l_max must be >= base_level")
        if self.p_max is not None and self.p_max < 0:
            raise ConfigError("p_max must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.pmf_kind not in ("geometric", "log-corrected"):
            raise ConfigError(f"unknown pmf_kind {self.pmf_kind!r}")
        if self.n0 < 1 or self.m < 1:
            raise ConfigError("n0 and m must be >= 1")

    @property
    def method(self) -> str:
        return "ub-amlpf" if self.antithetic else "ub-mlpf"

    @cached_property
    def pmf_L(self) -> Pmf:
        if self.pmf_kind == "geometric":
            return geometric_pmf(self.tau, self.base_level, self.l_max, "level")
        return log_corrected_pmf(self.base_level, self.l_max, "level")

    @cached_property
    def pmf_P(self) -> Pmf:
        if self.pmf_kind == "geometric":
            return geometric_pmf(1.0, 0, self.p_max, "sample-size")
        return log_corrected_pmf(0, self.p_max, "sample-size")

    def n_p(self, p: int) -> int:
        return self.n0 << p

    def to_dict(self) -> dict:
        return asdict(self)


def l_max_for(epsilon: float) -> int:
    return max(2, math.ceil(math.log2(1.0 / epsilon)))


def default_config(
    epsilon: float,
    method: str = "ub-amlpf",
    base_level: int = 0,
    c_n: float = 1.0,
    c_m: float = 1.0,
    n0_cap: int = 256,
    seed: int = 0,
) -> RandomizationConfig:
    """Truncated configuration targeting MSE of order epsilon**2.

    L_max = P_max = max(2, ceil(log2(1/epsilon))); N_0 = c_n P_max**2 4**P_max
    capped at ``n0_cap``; M = ceil(c_m / epsilon**2); tau = 1 for the
    antithetic method and 1/2 for the baseline.
    """
    if not 0 < epsilon < 1:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    l_max = max(base_level + 1, l_max_for(epsilon))
    p_max = l_max
    n0 = max(1, min(int(math.ceil(c_n * p_max**2 * 4**p_max)), int(n0_cap)))
    return RandomizationConfig(
        base_level=base_level,
        l_max=l_max,
        p_max=p_max,
        tau=1.0 if method == "ub-amlpf" else 0.5,
        n0=n0,
        m=int(math.ceil(c_m / epsilon**2)),
        seed=seed,
        antithetic=method == "ub-amlpf",
    )


def run_sizes(n0: int, p: int) -> list:
    """Particle counts of the p + 1 independent runs: N_0, N_1 - N_0, ..., N_p - N_{p-1}."""
    return [n0] + [n0 << (q - 1) for q in range(1, p + 1)]


def combination_weights(n0: int, p: int) -> np.ndarray:
    """(N_q - N_{q-1}) / N_p for q = 0..p."""
    sizes = np.array(run_sizes(n0, p), dtype=float)
    return sizes / (n0 << p)


class _Summaries:
    """Observer storing, per time and group, log predictor mass of g and the self-normalized estimate."""

    def __init__(self, phi, k):
        self.phi = phi
        self.log_mass = None
        self.ratio = None
        self.k = k

    def __call__(self, t, xs, log_prior, log_lik, layout):
        m = len(xs)
        if self.log_mass is None:
            self.log_mass = np.empty((self.k, m, len(layout)))
            self.ratio = np.empty((self.k, m, len(layout)))
        lw = log_prior + log_lik
        shift = layout.max(lw)
        if not np.all(np.isfinite(shift)):
            j, g = np.argwhere(~np.isfinite(shift))[0]
            err = WeightCollapse(f"weight collapse at time {t} in ensemble {j}", t, int(j))
            err.group = int(g)
            raise err
        e = np.exp(lw - layout.expand(shift))
        s = layout.sum(e)
        f = layout.sum(e * np.stack([self.phi(x) for x in xs]))
        pshift = layout.max(log_prior)
        pmass = layout.sum(np.exp(log_prior - layout.expand(pshift)))
        self.log_mass[t - 1] = shift + np.log(s) - pshift - np.log(pmass)
        if getattr(self.phi, "kind", None) == "const":
            self.ratio[t - 1] = self.phi.value
        else:
            self.ratio[t - 1] = f / s


def _summarize(model, level, mode, sizes, rngs, data, k, phi, policy, literal_h):
    """Run independent groups in memory-bounded batches; returns ``(summaries, costs)``.

    Each group owns its generator, so the batching never changes any result.
    """
    cap = max(1, GRID_BUDGET >> level)
    batches, cur, tot = [], [], 0
    for g, n in enumerate(sizes):
        if cur and tot + n > cap:
            batches.append(cur)
            cur, tot = [], 0
        cur.append(g)
        tot += n
    batches.append(cur)
    log_mass, ratio, costs = [], [], []
    offset = 0
    for b in batches:
        summ = _Summaries(phi, k)
        try:
            c, _ = run_groups(model, level, mode, [sizes[g] for g in b], [rngs[g] for g in b], data, k, policy, summ, literal_h)
        except (WeightCollapse, NumericalFailure) as err:
            if getattr(err, "group", None) is not None:
                err.group += offset
            raise
        offset += len(b)
        log_mass.append(summ.log_mass)
        ratio.append(summ.ratio)
        costs.append(c)
    out = _Summaries(phi, k)
    out.log_mass = np.concatenate(log_mass, axis=-1)
    out.ratio = np.concatenate(ratio, axis=-1)
    return out, np.concatenate(costs)


def _pooled(log_mass, ratio, sizes):
    """Pool independent runs: sum_q n_q A_q(g phi) / sum_q n_q A_q(g), per ensemble row."""
    if log_mass.shape[-1] == 0:
        return np.zeros(log_mass.shape[:-1])
    c = np.asarray(sizes, dtype=float) * np.exp(log_mass - log_mass.max(axis=-1, keepdims=True))
    # centred on the first run so that equal per-run values pool to exactly that value
    r0 = ratio[..., :1]
    return r0[..., 0] + np.sum(c * (ratio - r0), axis=-1) / np.sum(c, axis=-1)


def _combine_tags(values, tags):
    v = dict(zip(tags, values))
    if len(tags) == 1:
        return v["fine"]
    if "anti" in v:
        return 0.5 * v["fine"] + 0.5 * v["anti"] - v["coarse"]
    return v["fine"] - v["coarse"]


@dataclass
class NestedEstimate:
    """Same-sample pair of estimates at N_p and N_{p-1}, for every time up to k."""

    value: float
    value_prev: float
    cost: int
    tags: list
    tags_prev: list
    by_time: np.ndarray = field(repr=False, default=None)
    by_time_prev: np.ndarray = field(repr=False, default=None)


def _nested_from_groups(summ, groups, sizes, tags, costs, run_tags):
    """Pooled estimate at N_p (all groups) and N_{p-1} (all but the last)."""
    lm = summ.log_mass[:, :, groups]
    rt = summ.ratio[:, :, groups]
    full = _combine_tags(np.moveaxis(_pooled(lm, rt, sizes), 1, 0), tags)
    if len(groups) > 1:
        prev = _combine_tags(np.moveaxis(_pooled(lm[..., :-1], rt[..., :-1], sizes[:-1]), 1, 0), tags)
    else:
        prev = np.zeros_like(full)
    return NestedEstimate(
        value=float(full[-1]),
        value_prev=float(prev[-1]),
        cost=int(sum(costs)),
        tags=list(run_tags),
        tags_prev=list(run_tags[:-1]),
        by_time=full,
        by_time_prev=prev,
    )


def _mode(level, base_level, antithetic):
    if level == base_level:
        return "single"
    return "antithetic" if antithetic else "pair"


def _child_rngs(rng, count):
    if isinstance(rng, (list, tuple)):
        if len(rng) != count:
            raise ValueError(f"need {count} generators, got {len(rng)}")
        return list(rng)
    return as_generator(rng).spawn(count)


def nested_pf_estimate(model, data, k, base_level, p, phi, rng, n0=64, policy=ResamplePolicy(), literal_h=False) -> NestedEstimate:
    """Pooled single-level estimates at N_p and N_{p-1} from p + 1 independent filters."""
    return _nested(model, data, k, base_level, "single", p, phi, rng, n0, policy, literal_h)


def nested_cpf_estimate(model, data, k, level, p, phi, rng, n0=64, antithetic=True, policy=ResamplePolicy(), literal_h=False) -> NestedEstimate:
    """Pooled level-increment estimates at N_p and N_{p-1} from p + 1 independent coupled filters."""
    if level < 1:
        raise ValueError("increment estimates need level >= 1")
    return _nested(model, data, k, level, "antithetic" if antithetic else "pair", p, phi, rng, n0, policy, literal_h)


def _nested(model, data, k, level, mode, p, phi, rng, n0, policy, literal_h):
    if p < 0:
        raise ValueError("p must be >= 0")
    sizes = run_sizes(n0, p)
    rngs = _child_rngs(rng, p + 1)
    summ, costs = _summarize(model, level, mode, sizes, rngs, data, k, phi, policy, literal_h)
    return _nested_from_groups(summ, np.arange(p + 1), np.array(sizes), MODES[mode], costs, [f"run{q}" for q in range(p + 1)])


@dataclass
class IncrementRecord:
    i: int
    l: int
    p: int
    xi: float
    cost: int
    seed_tag: str
    run_tags: list = field(default_factory=list, repr=False)
    prev_run_tags: list = field(default_factory=list, repr=False)


@dataclass
class UnbiasedResult:
    estimate: float
    records: list
    total_cost: int
    wall_time: float
    config: RandomizationConfig
    k: int

    def weighted_terms(self) -> np.ndarray:
        pmf = self.config.pmf_L
        return np.array([r.xi / pmf(r.l) for r in self.records])

    def recompute(self) -> float:
        return float(np.mean(self.weighted_terms()))

    @property
    def stderr(self) -> float:
        t = self.weighted_terms()
        return float(t.std(ddof=1) / math.sqrt(len(t))) if len(t) > 1 else float("nan")


def draw_level_and_size(config: RandomizationConfig, i: int):
    rng = generator(config.seed, i, 0)
    return config.pmf_L.sample(rng), config.pmf_P.sample(rng)


def xi_term(config, model, data, k, l, p, phi, i=0, policy=ResamplePolicy(), literal_h=False) -> IncrementRecord:
    """One Xi_{l,p} for replicate index ``i`` (which fixes its random streams)."""
    return _evaluate(config, model, data, k, phi, [i], policy, literal_h, forced={i: (l, p)})[0]


def _evaluate(config, model, data, k, phi, indices, policy, literal_h, forced=None):
    """Records for a block of replicate indices, batching replicates that share a level."""
    draws = {i: (forced or {}).get(i) or draw_level_and_size(config, i) for i in indices}
    by_level = {}
    for i in indices:
        by_level.setdefault(draws[i][0], []).append(i)
    out = {}
    for l in sorted(by_level):
        reps = by_level[l]
        mode = _mode(l, config.base_level, config.antithetic)
        sizes, rngs, owner = [], [], []
        for i in reps:
            p = draws[i][1]
            for q, n in enumerate(run_sizes(config.n0, p)):
                sizes.append(n)
                rngs.append(generator(config.seed, i, q + 1))
                owner.append(i)
        try:
            summ, costs = _summarize(model, l, mode, sizes, rngs, data, k, phi, policy, literal_h)
        except (WeightCollapse, NumericalFailure) as err:
            g = getattr(err, "group", None)
            err.replicate = owner[g] if g is not None else None
            raise
        owner = np.array(owner)
        sizes = np.array(sizes)
        for i in reps:
            groups = np.flatnonzero(owner == i)
            p = draws[i][1]
            tags = [seed_tag(i, q + 1) for q in range(p + 1)]
            est = _nested_from_groups(summ, groups, sizes[groups], MODES[mode], costs[groups], tags)
            xi = (est.value - est.value_prev) / config.pmf_P(p)
            out[i] = IncrementRecord(i, l, p, xi, est.cost, seed_tag(i), est.tags, est.tags_prev)
    return [out[i] for i in indices]


def _evaluate_block(args):
    return _evaluate(*args)


def unbiased_estimate(config, model, data, k, phi, parallel_width=1, policy=ResamplePolicy(), literal_h=False) -> UnbiasedResult:
    """Average of M single-term draws xi_i / pmf_L(l_i).

    Replicates are processed in fixed blocks of consecutive indices, so the
    records are identical for any ``parallel_width``.
    """
    t0 = time.perf_counter()
    blocks = [list(range(s, min(s + CHUNK, config.m))) for s in range(0, config.m, CHUNK)]
    args = [(config, model, data, k, phi, b, policy, literal_h) for b in blocks]
    if parallel_width > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=parallel_width) as ex:
            parts = list(ex.map(_evaluate_block, args))
    else:
        parts = [_evaluate_block(a) for a in args]
    records = sorted((r for part in parts for r in part), key=lambda r: r.i)
    pmf = config.pmf_L
    estimate = float(np.mean([r.xi / pmf(r.l) for r in records]))
    return UnbiasedResult(
        estimate=estimate,
        records=records,
        total_cost=int(sum(r.cost for r in records)),
        wall_time=time.perf_counter() - t0,
        config=config,
        k=k,
    )


def amlpf_allocation(epsilon, l_top, base_level=0, c=1.0, n_min=8):
    """N_l = ceil(c eps**-2 (L - base + 1) 2**-(l - base)) for l = base..L.

    The allocation that equalizes variance per unit cost when the level-l
    increment variance is O(2**-l) and its cost O(2**l).
    """
    span = l_top - base_level + 1
    return [
        max(n_min, int(math.ceil(c * span * 2.0 ** (-(l - base_level)) / epsilon**2)))
        for l in range(base_level, l_top + 1)
    ]


def _estimates_by_time(model, level, mode, n, data, k, phi, rng, policy, literal_h):
    summ, costs = _summarize(model, level, mode, [n], [rng], data, k, phi, policy, literal_h)
    return _combine_tags(summ.ratio[:, :, 0].T, MODES[mode]), int(costs[0])


def amlpf_estimate(model, data, k, l_top, n_per_level, phi, rng, base_level=0, antithetic=True, policy=ResamplePolicy(), literal_h=False):
    """Telescoping multilevel estimate: PF at ``base_level`` plus coupled increments up to ``l_top``.

    Returns ``(estimate, cost)``; ``n_per_level[j]`` is the sample size at
    level ``base_level + j``.
    """
    if l_top < base_level:
        raise ValueError("l_top must be >= base_level")
    if len(n_per_level) != l_top - base_level + 1:
        raise ValueError("need one sample size per level")
    rngs = _child_rngs(rng, l_top - base_level + 1)
    total, cost = 0.0, 0
    for j, l in enumerate(range(base_level, l_top + 1)):
        mode = _mode(l, base_level, antithetic)
        est, c = _estimates_by_time(model, l, mode, n_per_level[j], data, k, phi, rngs[j], policy, literal_h)
        total += est[k - 1]
        cost += c
    return float(total), cost


def pf_level_estimate(model, data, k, level, n, phi, rng, policy=ResamplePolicy(), literal_h=False):
    """Plain particle filter estimate at one level; returns ``(estimate, cost)``."""
    est, c = _estimates_by_time(model, level, "single", n, data, k, phi, as_generator(rng), policy, literal_h)
    return float(est[k - 1]), c


@dataclass
class ProbeResult:
    l: int
    p: int
    n_p: int
    second_moment: float
    stderr: float
    mean: float
    diff_second_moment: float  # E[(estimate(N_p) - estimate(N_{p-1}))^2]
    diff_stderr: float
    reps: int


def variance_probe(model, data, k, l, p, phi, reps=50, antithetic=True, n0=64, seed=0, reference=None,
                   base_level=0, policy=ResamplePolicy(), literal_h=False) -> ProbeResult:
    """Monte Carlo second moment of the N_p-sample estimate at level ``l`` about ``reference``.

    With ``reference=None`` the sample mean of the replicates is used, which
    turns the second moment into the (biased, ddof=0) sample variance. All
    ``reps`` replicates run as independent groups of one batched filter.
    """
    if reps < 50:
        raise ValueError("variance_probe needs reps >= 50")
    mode = _mode(l, base_level, antithetic)
    per = run_sizes(n0, p)
    sizes = per * reps
    rngs = [generator(seed, l, p, r, q) for r in range(reps) for q in range(p + 1)]
    summ, _ = _summarize(model, l, mode, sizes, rngs, data, k, phi, policy, literal_h)
    vals, diffs = np.empty(reps), np.empty(reps)
    for r in range(reps):
        groups = np.arange(r * (p + 1), (r + 1) * (p + 1))
        est = _nested_from_groups(summ, groups, np.array(per), MODES[mode], [0] * len(groups), [""] * len(groups))
        vals[r] = est.value
        diffs[r] = est.value - est.value_prev
    ref = vals.mean() if reference is None else reference
    sq = (vals - ref) ** 2
    dsq = diffs**2
    return ProbeResult(
        l=l,
        p=p,
        n_p=n0 << p,
        second_moment=float(sq.mean()),
        stderr=float(sq.std(ddof=1) / math.sqrt(reps)),
        mean=float(vals.mean()),
        diff_second_moment=float(dsq.mean()),
        diff_stderr=float(dsq.std(ddof=1) / math.sqrt(reps)),
        reps=reps,
    )


def finite_variance_sum(config: RandomizationConfig, probes) -> float:
    """sum_l E[Xi_l^2] / pmf_L(l) with E[Xi_l^2] = sum_p E[(Delta estimate)^2] / pmf_P(p), from probe data."""
    total = 0.0
    for pr in probes:
        total += pr.diff_second_moment / (config.pmf_P(pr.p) * config.pmf_L(pr.l))
    return total


def fit_slope(x, y):
    """Least-squares slope of y on x with its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct x values")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = len(x)
    if n > 2:
        resid = y - A @ coef
        s2 = resid @ resid / (n - 2)
        se = math.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    else:
        se = float("nan")
    return float(coef[0]), se
