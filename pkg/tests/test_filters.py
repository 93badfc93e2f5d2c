import math

import numpy as np
import pytest

from ubfilter.errors import WeightCollapse
from ubfilter.estimators import MODES, _combine_tags, _summarize
from ubfilter.filters import (
    CoupledEnsemble,
    Ensemble,
    Layout,
    ResamplePolicy,
    cpf2_run,
    cpf_increment_estimate,
    cpf_run,
    pf_estimate,
    pf_run,
    write_trace,
)
from ubfilter.milstein import antithetic_cost, pair_cost
from ubfilter.models import CustomModel, Dataset, TestFunction, gbm_model
from ubfilter.oracles import gbm_filter_mean
from ubfilter.streams import generator

X1 = TestFunction("coord", 0)
ONE = TestFunction("const")


def flat_model():
    # Brownian motion with a constant likelihood
    return CustomModel(
        dim=1,
        drift_fn=lambda x: np.zeros_like(x),
        diffusion_fn=lambda x: np.ones(x.shape + (1,)),
        log_g=lambda x, y: np.zeros(x.shape[:-1]),
        sample_g=lambda x, rng: np.zeros(1),
        x_init=(0.0,),
        corr=lambda x: np.zeros(x.shape[:-1] + (1, 1, 1)),
    )


def test_policy_validation():
    with pytest.raises(ValueError):
        ResamplePolicy("sometimes")
    with pytest.raises(ValueError):
        ResamplePolicy(threshold=0.0)
    with pytest.raises(ValueError):
        ResamplePolicy(threshold=1.5)


def test_layout_reductions():
    lay = Layout([2, 3, 1])
    a = np.arange(6.0)
    np.testing.assert_array_equal(lay.sum(a), [1, 9, 5])
    np.testing.assert_array_equal(lay.max(a), [1, 4, 5])
    np.testing.assert_array_equal(lay.expand(np.array([7, 8, 9])), [7, 7, 8, 8, 8, 9])
    assert [lay.group_of(r) for r in range(6)] == [0, 0, 1, 1, 1, 2]
    with pytest.raises(ValueError):
        Layout([2, 0])


def test_constant_likelihood_never_resamples():
    data = Dataset(np.zeros((5, 1)))
    res = pf_run(flat_model(), 2, 50, data, ResamplePolicy("adaptive"), rng=0)
    assert not any(res.resampled)
    for snap in res.snapshots:
        np.testing.assert_allclose(snap.weights(), 1 / 50)
        assert snap.ess() == pytest.approx(50)
        assert pf_estimate(snap, X1) == pytest.approx(snap.particles[:, 0].mean())


def test_always_policy_resamples_every_time(gbm, gbm_data):
    res = pf_run(gbm, 2, 20, gbm_data, ResamplePolicy("always"), rng=1)
    assert res.resampled == [True] * (gbm_data.n - 1)
    res = cpf_run(gbm, 2, 20, gbm_data, ResamplePolicy("always"), rng=1, k=4)
    assert res.resampled == [True] * 3


def test_single_particle(gbm, gbm_data):
    res = pf_run(gbm, 3, 1, gbm_data, rng=5)
    for snap in res.snapshots:
        assert pf_estimate(snap, X1) == snap.particles[0, 0]


def test_pf_estimate_hand_value():
    ens = Ensemble(np.array([[0.0], [4.0]]), 0, 1, np.zeros(2), np.log([0.25, 0.75]))
    assert pf_estimate(ens, X1) == pytest.approx(3.0)
    assert pf_estimate(ens, ONE) == 1.0


def test_weight_collapse_is_reported():
    ens = Ensemble(np.zeros((2, 1)), 0, 3, np.zeros(2), np.full(2, -np.inf))
    with pytest.raises(WeightCollapse):
        pf_estimate(ens, X1)
    m = CustomModel(1, lambda x: np.zeros_like(x), lambda x: np.ones(x.shape + (1,)),
                    lambda x, y: np.full(x.shape[:-1], -np.inf), None, (0.0,), lambda x: np.zeros(x.shape[:-1] + (1, 1, 1)))
    with pytest.raises(WeightCollapse) as info:
        pf_run(m, 1, 10, Dataset(np.zeros((3, 1))), rng=0)
    assert info.value.time == 1


def test_cost_accounting(gbm, gbm_data):
    k, n = 7, 13
    assert pf_run(gbm, 4, n, gbm_data, rng=0, k=k).cost == k * n * 16
    assert cpf_run(gbm, 4, n, gbm_data, rng=0, k=k).cost == k * n * antithetic_cost(4)
    assert cpf2_run(gbm, 4, n, gbm_data, rng=0, k=k).cost == k * n * pair_cost(4)


def test_coupled_weights_normalized(cc, cc_data):
    res = cpf_run(cc, 3, 100, cc_data, rng=2)
    for snap in res.snapshots:
        for tag in snap.tags:
            assert snap.weights(tag).sum() == pytest.approx(1.0, abs=1e-12)
        assert cpf_increment_estimate(snap, ONE) == 0.0
    res2 = cpf2_run(cc, 3, 100, cc_data, rng=2)
    assert all(cpf_increment_estimate(s, ONE) == 0.0 for s in res2.snapshots)


def test_equal_pair_hook_makes_fine_and_anti_coincide(cc, cc_data):
    def equal_pairs(z):
        z = z.copy()
        z[1::2] = z[0::2]
        return z

    res = cpf_run(cc, 3, 200, cc_data, rng=3, grid_hook=equal_pairs)
    for snap in res.snapshots:
        np.testing.assert_array_equal(snap["fine"], snap["anti"])
        np.testing.assert_array_equal(snap.log_weights("fine"), snap.log_weights("anti"))


def test_identical_triples_give_zero_increment():
    x = np.array([[0.3], [1.2], [-0.5]])
    lw = np.log([[0.2, 0.3, 0.5]] * 3)
    snap = CoupledEnsemble(("fine", "coarse", "anti"), [x, x, x], 2, 1, np.zeros((3, 3)), lw)
    assert cpf_increment_estimate(snap, X1) == 0.0


def test_pf_matches_exact_filter(gbm, gbm_data):
    k, n, reps = 10, 10_000, 5
    vals = []
    for r in range(reps):
        res = pf_run(gbm, 8, n, gbm_data, rng=generator(1, r), k=k)
        vals.append(pf_estimate(res.at(k), X1))
    truth = gbm_filter_mean(gbm, gbm_data, k)
    se = np.std(vals, ddof=1) / math.sqrt(reps)
    # discretization bias at level 8 is O(1e-6)
    assert abs(np.mean(vals) - truth) <= 3 * se + 1e-4


def test_adaptive_and_always_agree(gbm, gbm_data):
    k = 10
    out = {}
    for mode in ("adaptive", "always"):
        s, _ = _summarize(gbm, 3, "single", [500] * 100, [generator(2, r) for r in range(100)], gbm_data, k, X1,
                          ResamplePolicy(mode), False)
        out[mode] = s.ratio[k - 1, 0]
    diff = out["adaptive"].mean() - out["always"].mean()
    se = math.sqrt(out["adaptive"].var(ddof=1) / 100 + out["always"].var(ddof=1) / 100)
    assert abs(diff) <= 3 * se


def _by_tag(model, level, mode, n, reps, data, k, phi, seed):
    s, _ = _summarize(model, level, mode, [n] * reps, [generator(seed, r) for r in range(reps)], data, k, phi,
                      ResamplePolicy(), False)
    return {tag: s.ratio[k - 1, j] for j, tag in enumerate(MODES[mode])}, s


@pytest.mark.parametrize("mode", ["antithetic", "pair"])
def test_coupled_marginals_match_independent_pf(cc, cc_data, mode):
    k, level, n, reps = 10, 5, 5000, 50
    coupled, _ = _by_tag(cc, level, mode, n, reps, cc_data, k, X1, 10)
    single, _ = _by_tag(cc, level, "single", n, reps, cc_data, k, X1, 20)
    a, b = coupled["fine"], single["fine"]
    se = math.sqrt(a.var(ddof=1) / reps + b.var(ddof=1) / reps)
    assert abs(a.mean() - b.mean()) <= 3 * se
    if mode == "antithetic":
        a = coupled["anti"]
        assert abs(a.mean() - b.mean()) <= 3 * math.sqrt(a.var(ddof=1) / reps + b.var(ddof=1) / reps)


def test_increment_matches_independent_pf_difference(gbm, gbm_data):
    k, level = 5, 4
    s, _ = _by_tag(gbm, level, "antithetic", 10_000, 100, gbm_data, k, X1, 30)
    inc = 0.5 * (s["fine"] + s["anti"]) - s["coarse"]
    fine, _ = _by_tag(gbm, level, "single", 100_000, 20, gbm_data, k, X1, 40)
    coarse, _ = _by_tag(gbm, level - 1, "single", 100_000, 20, gbm_data, k, X1, 50)
    oracle = fine["fine"].mean() - coarse["fine"].mean()
    se = math.sqrt(inc.var(ddof=1) / 100 + fine["fine"].var(ddof=1) / 20 + coarse["fine"].var(ddof=1) / 20)
    assert abs(inc.mean() - oracle) <= 3 * se


def test_group_batching_does_not_change_results(cc, cc_data):
    from ubfilter.filters import run_groups

    def collect(sizes, rngs):
        got = []
        run_groups(cc, 3, "antithetic", sizes, rngs, cc_data, 5, ResamplePolicy(), lambda t, xs, lp, ll, lay: got.append(
            [x.copy() for x in xs]))
        return got

    together = collect([30, 20], [generator(0, 0), generator(0, 1)])
    alone = collect([20], [generator(0, 1)])
    for t in range(5):
        for j in range(3):
            np.testing.assert_array_equal(together[t][j][30:], alone[t][j])


def test_write_trace(tmp_path, gbm, gbm_data):
    res = cpf_run(gbm, 2, 50, gbm_data, rng=0, k=3)
    path = tmp_path / "trace.csv"
    write_trace(res, X1, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("k,ess_fine,ess_coarse,ess_anti,est_fine")
    assert len(lines) == 4
    write_trace(pf_run(gbm, 2, 50, gbm_data, rng=0, k=2), X1, tmp_path / "t2.csv")


def test_level_zero_rejected_for_coupled(gbm, gbm_data):
    with pytest.raises(ValueError):
        cpf_run(gbm, 0, 10, gbm_data)
    with pytest.raises(ValueError):
        cpf2_run(gbm, 0, 10, gbm_data)
    with pytest.raises(ValueError):
        pf_run(gbm, 1, 0, gbm_data)


def test_gbm_model_unused_guard():
    # the positivity clamp must not bind along benchmark paths
    m = gbm_model()
    assert m.eps_pos == 1e-300
