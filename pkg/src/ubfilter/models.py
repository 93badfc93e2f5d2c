"""State-space models: a diffusion observed with noise at unit times.

All model methods are vectorized over leading axes: a state array has shape
``(..., d)``, the diffusion matrix ``(..., d, d)`` and the Milstein correction
tensor ``(..., d, d, d)`` indexed ``[..., i, j, k]`` with

    h_ijk(x) = 1/2 * sum_m beta_mk(x) * d beta_ij(x) / d x_m.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NumericalFailure
from .streams import as_generator

LOG_2PI = math.log(2.0 * math.pi)


def milstein_correction(h, z, delta, literal_h=False):
    """Quadratic Milstein correction H_delta(x, z) from a correction tensor.

    With ``literal_h`` every (j, k) pair subtracts ``delta``; otherwise only
    the diagonal does (the Ito-isometry-consistent form).
    """
    zz = z[..., :, None] * z[..., None, :]
    if literal_h:
        zz = zz - delta
    else:
        d = z.shape[-1]
        zz = zz - delta * np.eye(d)
    return np.einsum("...ijk,...jk->...i", h, zz)


def fd_corr_tensor(diffusion: Callable, x, step=1e-5):
    """Correction tensor from central finite differences of ``diffusion``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    beta = diffusion(x)
    dbeta = np.empty(x.shape[:-1] + (d, d, d))  # [..., m, i, j]
    for m in range(d):
        e = np.zeros(d)
        e[m] = step
        dbeta[..., m, :, :] = (diffusion(x + e) - diffusion(x - e)) / (2 * step)
    return 0.5 * np.einsum("...mk,...mij->...ijk", beta, dbeta)


class StateSpaceModel:
    """Base class. Subclasses provide drift, diffusion, correction tensor and g.

    ``milstein_step`` has a generic implementation in terms of the three
    coefficient functions; built-in models override it with closed forms that
    agree to rounding error.
    """

    name = "abstract"
    dim: int
    obs_dim: int = 1

    @property
    def x0(self) -> np.ndarray:
        raise NotImplementedError

    def drift(self, x):
        raise NotImplementedError

    def diffusion(self, x):
        raise NotImplementedError

    def corr_tensor(self, x):
        return fd_corr_tensor(self.diffusion, x)

    def obs_log_density(self, x, y):
        raise NotImplementedError

    def obs_sample(self, x, rng):
        raise NotImplementedError

    def milstein_step(self, x, z, delta, literal_h=False):
        h = self.corr_tensor(x)
        return (
            x
            + self.drift(x) * delta
            + np.einsum("...ij,...j->...i", self.diffusion(x), z)
            + milstein_correction(h, z, delta, literal_h)
        )

    def params(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"name": self.name, **self.params()}


@dataclass(frozen=True)
class GBM(StateSpaceModel):
    """dX = mu X dt + sigma X dW, observed as Y | X=x ~ N(log x, tau2)."""

    mu: float = 0.02
    sigma: float = 0.2
    x_init: float = 1.0
    tau2: float = 0.02
    eps_pos: float = 1e-300

    name = "gbm"
    dim = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        if not self.x_init > 0:
            raise ValueError(f"x0 must be positive, got {self.x_init}")

    @property
    def x0(self):
        return np.array([self.x_init])

    def drift(self, x):
        return self.mu * x

    def diffusion(self, x):
        return self.sigma * x[..., None]

    def corr_tensor(self, x):
        return 0.5 * self.sigma**2 * x[..., None, None]

    def milstein_step(self, x, z, delta, literal_h=False):
        s = self.sigma
        return x * (1.0 + self.mu * delta + s * z + 0.5 * s * s * (z * z - delta))

    def obs_log_density(self, x, y):
        m = np.log(np.maximum(x[..., 0], self.eps_pos))
        r = y[0] - m
        return -0.5 * (LOG_2PI + math.log(self.tau2)) - 0.5 * r * r / self.tau2

    def obs_sample(self, x, rng):
        m = np.log(np.maximum(x[..., 0], self.eps_pos))
        return (m + math.sqrt(self.tau2) * rng.standard_normal(np.shape(m)))[..., None]

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma, "x0": self.x_init, "tau2": self.tau2}


@dataclass(frozen=True)
class ClarkCameron(StateSpaceModel):
    """dX1 = dW1, dX2 = X1 dW2 from the origin; Y ~ N((X1 + X2)/2, tau2)."""

    tau2: float = 0.1

    name = "clark-cameron"
    dim = 2

    def __post_init__(self):
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")

    @property
    def x0(self):
        return np.zeros(2)

    def drift(self, x):
        return np.zeros_like(x)

    def diffusion(self, x):
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = x[..., 0]
        return out

    def corr_tensor(self, x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 1, 1, 0] = 0.5
        return out

    def milstein_step(self, x, z, delta, literal_h=False):
        z1 = z[..., 0]
        z2 = z[..., 1]
        x1 = x[..., 0]
        corr = z1 * z2 - delta if literal_h else z1 * z2
        return np.stack((x1 + z1, x[..., 1] + x1 * z2 + 0.5 * corr), axis=-1)

    def obs_log_density(self, x, y):
        r = y[0] - 0.5 * (x[..., 0] + x[..., 1])
        return -0.5 * (LOG_2PI + math.log(self.tau2)) - 0.5 * r * r / self.tau2

    def obs_sample(self, x, rng):
        m = 0.5 * (x[..., 0] + x[..., 1])
        return (m + math.sqrt(self.tau2) * rng.standard_normal(np.shape(m)))[..., None]

    def params(self):
        return {"tau2": self.tau2}


@dataclass(frozen=True)
class NonlinearDiffusion(StateSpaceModel):
    """Two-dimensional SDE with diffusion sigma_i / sqrt(1 + X1^2), Laplace observations.

    dX1 = theta1 (mu1 - X1) dt + sigma1 / sqrt(1 + X1^2) dW1
    dX2 = theta2 (mu2 - X1) dt + sigma2 / sqrt(1 + X1^2) dW2
    Y | X ~ Laplace((X1 + X2)/2, s)

    The second drift depends on X1, as in the published model.
    """

    theta: tuple = (1.0, 1.0)
    mu: tuple = (0.0, 0.0)
    sigma: tuple = (1.0, 1.0)
    s: float = math.sqrt(0.1)

    name = "nlm"
    dim = 2

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.s}")
        for f in ("theta", "mu", "sigma"):
            object.__setattr__(self, f, tuple(float(v) for v in getattr(self, f)))

    @property
    def x0(self):
        return np.zeros(2)

    def drift(self, x):
        x1 = x[..., 0]
        return np.stack(
            (self.theta[0] * (self.mu[0] - x1), self.theta[1] * (self.mu[1] - x1)), axis=-1
        )

    def diffusion(self, x):
        f = 1.0 / np.sqrt(1.0 + x[..., 0] ** 2)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = self.sigma[0] * f
        out[..., 1, 1] = self.sigma[1] * f
        return out

    def corr_tensor(self, x):
        x1 = x[..., 0]
        c = -0.5 * self.sigma[0] * x1 / (1.0 + x1 * x1) ** 2
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = c * self.sigma[0]
        out[..., 1, 1, 0] = c * self.sigma[1]
        return out

    def milstein_step(self, x, z, delta, literal_h=False):
        x1 = x[..., 0]
        z1 = z[..., 0]
        z2 = z[..., 1]
        q = 1.0 + x1 * x1
        f = 1.0 / np.sqrt(q)
        c = -0.5 * self.sigma[0] * x1 / (q * q)
        s1, s2 = self.sigma
        cross = z1 * z2 - delta if literal_h else z1 * z2
        return np.stack(
            (
                x1 + self.theta[0] * (self.mu[0] - x1) * delta + s1 * f * z1 + c * s1 * (z1 * z1 - delta),
                x[..., 1] + self.theta[1] * (self.mu[1] - x1) * delta + s2 * f * z2 + c * s2 * cross,
            ),
            axis=-1,
        )

    def obs_log_density(self, x, y):
        m = 0.5 * (x[..., 0] + x[..., 1])
        return -math.log(2.0 * self.s) - np.abs(y[0] - m) / self.s

    def obs_sample(self, x, rng):
        m = 0.5 * (x[..., 0] + x[..., 1])
        return rng.laplace(m, self.s)[..., None] if np.ndim(m) else np.array([rng.laplace(m, self.s)])

    def params(self):
        return {"theta": list(self.theta), "mu": list(self.mu), "sigma": list(self.sigma), "s": self.s}


@dataclass(frozen=True)
class CustomModel(StateSpaceModel):
    """Model assembled from user callables.

    When ``corr`` is omitted the correction tensor comes from central
    finite differences of ``diffusion_fn``. Callables must accept ``(..., d)``
    arrays. Closures do not pickle, so such models only run with
    ``parallel_width=1``.
    """

    dim: int
    drift_fn: Callable
    diffusion_fn: Callable
    log_g: Callable
    sample_g: Callable
    x_init: tuple
    corr: Callable | None = None
    obs_dim: int = 1

    name = "custom"

    @property
    def x0(self):
        return np.asarray(self.x_init, dtype=float)

    def drift(self, x):
        return self.drift_fn(x)

    def diffusion(self, x):
        return self.diffusion_fn(x)

    def corr_tensor(self, x):
        if self.corr is not None:
            return self.corr(x)
        return fd_corr_tensor(self.diffusion_fn, x)

    def obs_log_density(self, x, y):
        return self.log_g(x, y)

    def obs_sample(self, x, rng):
        return self.sample_g(x, rng)


def gbm_model(mu=0.02, sigma=0.2, x0=1.0, tau2=0.02) -> GBM:
    return GBM(mu=mu, sigma=sigma, x_init=x0, tau2=tau2)


def clark_cameron_model(tau2=0.1) -> ClarkCameron:
    return ClarkCameron(tau2=tau2)


def nlm_model(theta=(1.0, 1.0), mu=(0.0, 0.0), sigma=(1.0, 1.0), s=math.sqrt(0.1)) -> NonlinearDiffusion:
    return NonlinearDiffusion(theta=tuple(theta), mu=tuple(mu), sigma=tuple(sigma), s=s)


MODEL_BUILDERS = {
    "gbm": gbm_model,
    "clark-cameron": clark_cameron_model,
    "nlm": nlm_model,
}


def build_model(name: str, **params) -> StateSpaceModel:
    try:
        builder = MODEL_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_BUILDERS)}") from None
    return builder(**params)


@dataclass(frozen=True)
class TestFunction:
    """A bounded test function phi: a coordinate, the coordinate mean, or a constant.

    Values are clipped to ``[-bound, bound]``; on the built-in models the clip
    never binds, it only guards the boundedness assumption.
    """

    __test__ = False  # keep pytest from collecting this class

    kind: str = "coord"
    index: int = 0
    value: float = 1.0
    bound: float = 1e8

    def __call__(self, x):
        x = np.asarray(x)
        if self.kind == "coord":
            v = x[..., self.index]
        elif self.kind == "mean":
            v = x.mean(axis=-1)
        elif self.kind == "const":
            return np.full(x.shape[:-1], float(self.value))
        else:
            raise ValueError(f"unknown test function kind {self.kind!r}")
        return np.clip(v, -self.bound, self.bound)

    @property
    def tag(self) -> str:
        if self.kind == "coord":
            return f"x{self.index + 1}"
        if self.kind == "const":
            return f"const:{self.value:g}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "TestFunction":
        text = text.strip().lower()
        if text == "mean":
            return cls(kind="mean")
        if text.startswith("const"):
            _, _, v = text.partition(":")
            return cls(kind="const", value=float(v) if v else 1.0)
        if text.startswith("x") and text[1:].isdigit() and int(text[1:]) >= 1:
            return cls(kind="coord", index=int(text[1:]) - 1)
        raise ValueError(f"cannot parse test function {text!r} (use x1, x2, mean, const[:c])")


@dataclass
class Dataset:
    observations: np.ndarray  # (n, d_y)
    latent: np.ndarray | None = None  # (n, d), state at each observation time
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if self.observations.shape[0] == 0:
            raise ValueError("dataset must contain at least one observation")
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=float)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    def __len__(self):
        return self.n

    def y(self, k: int) -> np.ndarray:
        """Observation at time k (1-based)."""
        return self.observations[k - 1]

    def to_csv(self, path) -> Path:
        """Write ``k,y_1..y_dy`` rows plus a JSON sidecar with metadata and latent path."""
        path = Path(path)
        d_y = self.observations.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + [f"y_{j + 1}" for j in range(d_y)])
            for k, row in enumerate(self.observations, start=1):
                w.writerow([k] + [repr(float(v)) for v in row])
        side = {"metadata": self.metadata}
        if self.latent is not None:
            side["latent"] = self.latent.tolist()
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        obs = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        meta, latent = {}, None
        side = path.with_suffix(".json")
        if side.exists():
            info = json.loads(side.read_text())
            meta = info.get("metadata", {})
            latent = info.get("latent")
        return cls(observations=obs, latent=None if latent is None else np.array(latent), metadata=meta)


def simulate_dataset(model: StateSpaceModel, n: int, data_level: int = 10, rng=None) -> Dataset:
    """Simulate the latent path with the truncated Milstein kernel and draw y_1..y_n.

    ``rng`` may be an int seed (recorded in the metadata) or a Generator.
    """
    from .milstein import propagate_single

    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if data_level < 6:
        raise ValueError(f"data_level must be >= 6 for negligible generation bias, got {data_level}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = as_generator(rng)
    x = model.x0.copy()
    latent = np.empty((n, model.dim))
    obs = np.empty((n, model.obs_dim))
    for k in range(n):
        x, _ = propagate_single(model, data_level, x, gen)
        y = np.asarray(model.obs_sample(x, gen), dtype=float).reshape(model.obs_dim)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure(f"observation sampler returned non-finite value at k={k + 1}")
        latent[k] = x
        obs[k] = y
    meta = {"model": model.spec(), "data_level": int(data_level), "seed": None if seed is None else int(seed), "n": int(n)}
    return Dataset(observations=obs, latent=latent, metadata=meta)
