import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubfilter.errors import NumericalFailure
from ubfilter.milstein import (
    CostMeter,
    NoiseGrid,
    antithetic_cost,
    coarsen,
    delta,
    draw_grid,
    milstein_step,
    n_steps,
    propagate_antithetic,
    propagate_pair,
    propagate_single,
    rho,
    run_grid,
)
from ubfilter.models import CustomModel, clark_cameron_model, gbm_model, nlm_model
from ubfilter.estimators import fit_slope


@pytest.mark.parametrize("level", range(0, 20))
def test_level_step_is_exact(level):
    assert delta(level) * n_steps(level) == 1.0


def test_gbm_step_hand_values(gbm):
    for d in (1.0, 0.5, 0.25, 2.0**-10):
        assert milstein_step(gbm, np.array([1.0]), np.array([0.0]), d)[0] == pytest.approx(1.0, abs=1e-15)
    out = milstein_step(gbm, np.array([1.0]), np.array([0.1]), 0.25)[0]
    # 1 + 0.02*0.25 + 0.2*0.1 + 0.02*(0.01 - 0.25)
    assert out == pytest.approx(1.0202, abs=1e-14)


def test_zero_noise_zero_drift_is_identity():
    m = CustomModel(
        dim=2,
        drift_fn=lambda x: np.zeros_like(x),
        diffusion_fn=lambda x: np.broadcast_to(np.eye(2), x.shape + (2,)),
        log_g=None,
        sample_g=None,
        x_init=(0.0, 0.0),
        corr=lambda x: np.zeros(x.shape[:-1] + (2, 2, 2)),
    )
    x = np.array([0.4, -1.2])
    np.testing.assert_array_equal(milstein_step(m, x, np.zeros(2), 0.5), x)


def test_non_finite_state_raises_with_step(gbm):
    m = gbm_model(mu=1e308)
    # first step gives 2.5e307, the second overflows
    with pytest.raises(NumericalFailure) as info:
        run_grid(m, np.array([[1.0], [1.0]]), np.zeros((4, 2, 1)), 0.25, level=2)
    assert info.value.step == 1 and info.value.level == 2 and info.value.row == 0


def test_rho_swaps_consecutive_pairs():
    # one-based (2, 1) and (2, 1, 4, 3) become zero-based (1, 0) and (1, 0, 3, 2)
    np.testing.assert_array_equal(rho(1), [1, 0])
    np.testing.assert_array_equal(rho(2), [1, 0, 3, 2])
    for level in range(1, 8):
        r = rho(level)
        np.testing.assert_array_equal(r[r], np.arange(n_steps(level)))


def test_level_zero_single_step(gbm):
    rng = np.random.default_rng(4)
    x1, grid = propagate_single(gbm, 0, gbm.x0, rng)
    assert grid.z.shape == (1, 1)
    np.testing.assert_array_equal(x1, gbm.milstein_step(gbm.x0, grid.z[0], 1.0))


def test_propagate_single_replay_and_meter(cc):
    meter = CostMeter()
    a, ga = propagate_single(cc, 5, np.zeros((10, 2)), np.random.default_rng(1), meter)
    b, gb = propagate_single(cc, 5, np.zeros((10, 2)), np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ga.z, gb.z)
    assert meter.steps == 32 * 10


def test_grid_scaling():
    z = draw_grid(6, (20_000,), 1, np.random.default_rng(0)).z
    assert z.shape == (64, 20_000, 1)
    assert z.var() == pytest.approx(delta(6), rel=0.01)


def test_gbm_mean_at_level_8(gbm):
    n = 100_000
    x, _ = propagate_single(gbm, 8, np.ones((n, 1)), np.random.default_rng(8))
    se = x.std() / math.sqrt(n)
    # E X_1 = exp(mu); level-8 bias exp(mu) - (1 + mu/256)^256 is ~1e-6
    assert abs(x.mean() - math.exp(0.02)) <= 3 * se + 1e-5


@pytest.mark.parametrize("model", [gbm_model(), clark_cameron_model(), nlm_model()], ids=lambda m: m.name)
@given(level=st.integers(1, 6), seed=st.integers(0, 2**32 - 1), literal=st.booleans())
@settings(max_examples=25, deadline=None)
def test_antithetic_kernel_structure(model, level, seed, literal):
    rng = np.random.default_rng(seed)
    starts = [np.abs(rng.normal(size=(3, model.dim))) + 0.5 for _ in range(3)]
    grid = draw_grid(level, (3,), model.dim, rng)
    meter = CostMeter()
    out = propagate_antithetic(model, level, starts, None, meter, literal, grid=grid)
    coarse = run_grid(model, starts[1], coarsen(grid.z), delta(level - 1), literal)
    fine = run_grid(model, starts[0], grid.z, delta(level), literal)
    anti = run_grid(model, starts[2], grid.z[rho(level)], delta(level), literal)
    np.testing.assert_allclose(out.coarse, coarse, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out.fine, fine)
    np.testing.assert_array_equal(out.anti, anti)
    assert meter.steps == 3 * antithetic_cost(level)


def test_antithetic_cost_values():
    assert [antithetic_cost(l) for l in (1, 2, 3)] == [4 + 1, 8 + 2, 16 + 4]


def test_equal_pairs_make_fine_and_anti_identical(cc):
    rng = np.random.default_rng(2)
    half = rng.normal(size=(8, 5, 2)) * math.sqrt(delta(4))
    z = np.repeat(half, 2, axis=0)
    x = rng.normal(size=(5, 2))
    out = propagate_antithetic(cc, 4, (x, x, x), None, grid=NoiseGrid(4, z))
    np.testing.assert_array_equal(out.fine, out.anti)


def test_single_state_input(cc):
    out = propagate_antithetic(cc, 2, (cc.x0, cc.x0, cc.x0), np.random.default_rng(0))
    assert out.fine.shape == (2,) and out.coarse.shape == (2,)


def test_antithetic_rejects_level_zero(gbm):
    with pytest.raises(ValueError):
        propagate_antithetic(gbm, 0, (gbm.x0,) * 3, np.random.default_rng(0))


def _strong_slopes(model, phi, levels, n, seed):
    anti, plain = [], []
    for l in levels:
        rng = np.random.default_rng(seed + l)
        x0 = np.broadcast_to(model.x0, (n, model.dim)).copy()
        out = propagate_antithetic(model, l, (x0, x0, x0), rng)
        f, c, a = phi(out.fine), phi(out.coarse), phi(out.anti)
        anti.append(math.log2(np.mean((0.5 * (f + a) - c) ** 2)))
        plain.append(math.log2(np.mean((f - c) ** 2)))
    return fit_slope(levels, anti)[0], fit_slope(levels, plain)[0]


def test_antithetic_strong_coupling_rate_gbm(gbm):
    s_anti, s_plain = _strong_slopes(gbm, lambda x: x[:, 0], range(3, 9), 10_000, 0)
    assert s_anti <= -1.5
    assert s_plain <= -0.8


def test_plain_coupling_rate_clark_cameron(cc):
    _, s_plain = _strong_slopes(cc, lambda x: x[:, 1], range(3, 9), 10_000, 100)
    assert s_plain <= -0.4


def test_clark_cameron_antithetic_average_is_exact(cc):
    # x1 is shared by all three paths and x2 never feeds back, so the averaged
    # fine/antithetic increments of each coarse step equal the coarse one
    for level in (2, 5):
        x0 = np.zeros((1000, 2))
        out = propagate_antithetic(cc, level, (x0, x0, x0), np.random.default_rng(level))
        np.testing.assert_allclose(0.5 * (out.fine + out.anti), out.coarse, atol=1e-12)


def test_pair_kernel_matches_antithetic_fine_and_coarse(nlm):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2))
    grid = draw_grid(3, (4,), 2, rng)
    fine, coarse = propagate_pair(nlm, 3, (x, x), None, grid=grid)
    out = propagate_antithetic(nlm, 3, (x, x, x), None, grid=grid)
    np.testing.assert_array_equal(fine, out.fine)
    np.testing.assert_array_equal(coarse, out.coarse)
