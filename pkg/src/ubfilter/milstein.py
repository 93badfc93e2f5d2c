"""Unit-time transition kernels built from truncated Milstein steps.

A level ``l`` kernel takes ``2**l`` steps of size ``2**-l``. Noise for one unit
interval is a grid ``z`` of shape ``(2**l, n, d)`` holding N(0, 2**-l) entries;
particle ``i`` is driven by ``z[:, i, :]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure


def delta(level: int) -> float:
    return 2.0 ** (-level)


def n_steps(level: int) -> int:
    return 1 << level


def antithetic_cost(level: int) -> int:
    """Milstein steps per path triple per unit time: fine + antithetic + coarse."""
    return (1 << (level + 1)) + (1 << (level - 1))


def pair_cost(level: int) -> int:
    """Milstein steps per fine/coarse pair per unit time (non-antithetic coupling)."""
    return (1 << level) + (1 << (level - 1))


@dataclass
class CostMeter:
    """Counts Milstein steps, one unit per path per step."""

    steps: int = 0

    def add(self, n: int) -> None:
        self.steps += int(n)


@dataclass
class NoiseGrid:
    level: int
    z: np.ndarray  # (2**level, ..., d)


@dataclass
class PathTriple:
    fine: np.ndarray
    coarse: np.ndarray
    anti: np.ndarray


def rho(level: int) -> np.ndarray:
    """Zero-based increment order of the antithetic path: swap within each consecutive pair."""
    k = np.arange(n_steps(level))
    return k + 1 - 2 * (k % 2)


def draw_grid(level: int, batch_shape: tuple, d: int, rng) -> NoiseGrid:
    z = rng.standard_normal((n_steps(level),) + tuple(batch_shape) + (d,)) * np.sqrt(delta(level))
    return NoiseGrid(level, z)


def milstein_step(model, x, z, dt, literal_h=False, step=None, level=None):
    """One truncated Milstein step x + a(x)dt + b(x)z + H_dt(x, z)."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = model.milstein_step(x, z, dt, literal_h)
    if not np.isfinite(out).all():
        err = NumericalFailure(
            f"non-finite state after Milstein step {step} at level {level}", step=step, level=level
        )
        if out.ndim > 1:
            err.row = int(np.flatnonzero(~np.isfinite(out).all(axis=-1))[0])
        raise err
    return out


def run_grid(model, x, z, dt, literal_h=False, level=None):
    """Apply one Milstein step per leading slice of ``z``."""
    for s in range(z.shape[0]):
        x = milstein_step(model, x, z[s], dt, literal_h, step=s, level=level)
    return x


def coarsen(z: np.ndarray) -> np.ndarray:
    """Pair-summed increments Z_{2k-1} + Z_{2k} driving the level l-1 path."""
    return z[0::2] + z[1::2]


def propagate_single(model, level, x0, rng, meter: CostMeter | None = None, literal_h=False):
    """Truncated Milstein kernel over [0, 1]; returns ``(X_1, grid)``.

    ``x0`` may be one state ``(d,)`` or a batch ``(n, d)``; each batch row gets
    its own increments.
    """
    x0 = np.asarray(x0, dtype=float)
    grid = draw_grid(level, x0.shape[:-1], model.dim, rng)
    x1 = run_grid(model, x0, grid.z, delta(level), literal_h, level)
    if meter is not None:
        meter.add(n_steps(level) * _batch(x0))
    return x1, grid


def antithetic_paths(model, level, xf, xc, xa, z, literal_h=False):
    """Deterministic part of the antithetic kernel given a level-``level`` grid ``z``.

    The fine and antithetic paths are advanced together as one stacked batch
    so they share every arithmetic operation.
    """
    if level < 1:
        raise ValueError("antithetic coupling needs level >= 1")
    if xf.ndim == 1:
        out = antithetic_paths(model, level, xf[None], xc[None], xa[None], z[:, None], literal_h)
        return PathTriple(out.fine[0], out.coarse[0], out.anti[0])
    n = xf.shape[0]
    dt = delta(level)
    zz = np.concatenate((z, z[rho(level)]), axis=1)
    both = run_grid(model, np.concatenate((xf, xa)), zz, dt, literal_h, level)
    coarse = run_grid(model, xc, coarsen(z), 2 * dt, literal_h, level - 1)
    return PathTriple(both[:n], coarse, both[n:])


def propagate_antithetic(model, level, starts, rng, meter: CostMeter | None = None, literal_h=False, grid=None):
    """Antithetic truncated Milstein kernel over [0, 1].

    ``starts`` is ``(x_fine, x_coarse, x_anti)``. A precomputed ``grid`` may be
    supplied (test hook); otherwise one is drawn from ``rng``.
    """
    xf, xc, xa = (np.asarray(s, dtype=float) for s in starts)
    if level < 1:
        raise ValueError("antithetic coupling needs level >= 1")
    if grid is None:
        grid = draw_grid(level, xf.shape[:-1], model.dim, rng)
    out = antithetic_paths(model, level, xf, xc, xa, grid.z, literal_h)
    if meter is not None:
        meter.add(antithetic_cost(level) * _batch(xf))
    return out


def coupled_paths(model, level, xf, xc, z, literal_h=False):
    """Fine path on ``z`` and coarse path on its pair sums (no antithetic partner)."""
    fine = run_grid(model, xf, z, delta(level), literal_h, level)
    coarse = run_grid(model, xc, coarsen(z), 2 * delta(level), literal_h, level - 1)
    return fine, coarse


def propagate_pair(model, level, starts, rng, meter: CostMeter | None = None, literal_h=False, grid=None):
    """Synchronously coupled fine/coarse kernel used by the non-antithetic baseline."""
    xf, xc = (np.asarray(s, dtype=float) for s in starts)
    if level < 1:
        raise ValueError("coupling needs level >= 1")
    if grid is None:
        grid = draw_grid(level, xf.shape[:-1], model.dim, rng)
    fine, coarse = coupled_paths(model, level, xf, xc, grid.z, literal_h)
    if meter is not None:
        meter.add(pair_cost(level) * _batch(xf))
    return fine, coarse


def _batch(x) -> int:
    return int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
