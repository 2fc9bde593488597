"""Discrete-time Gaussian dynamics with quadratic control cost.

The controlled dynamics are ``x^{t+1} = x^t + f(x^t, t) + u^t + xi`` with
``xi ~ N(0, nu)``.  Charging ``0.5 u' nu^{-1} u`` per step makes the problem a
KL control problem: that charge is exactly the KL divergence between the
controlled and the free one-step densities.  The optimal cost ``-log Z`` can
then be estimated by sampling the free dynamics alone.

Random numbers: trajectories are drawn in fixed blocks of ``BLOCK`` paths;
block ``j`` uses the ``j``-th child of ``SeedSequence(seed)``.  Results
therefore do not depend on how blocks are spread over threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from klcontrol.chain import ChainProblem
from klcontrol.errors import EstimationError, ValidationError

BLOCK = 1024

Drift = Callable[[np.ndarray, int], np.ndarray]
StateCost = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class ContinuousDynamics:
    """``drift(x, t)`` maps a (batch, n) array of states to (batch, n) drifts."""

    drift: Drift
    noise_covariance: np.ndarray

    def __post_init__(self):
        nu = np.atleast_2d(np.asarray(self.noise_covariance, dtype=float))
        if nu.shape[0] != nu.shape[1]:
            raise ValidationError(f"noise covariance must be square, got {nu.shape}")
        if not np.allclose(nu, nu.T, rtol=0, atol=1e-12):
            raise ValidationError("noise covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(nu)
        except np.linalg.LinAlgError as exc:
            raise ValidationError("noise covariance is not positive definite") from exc
        object.__setattr__(self, "noise_covariance", nu)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_precision", np.linalg.inv(nu))

    @property
    def dimension(self) -> int:
        return self.noise_covariance.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return self._precision

    def mean(self, x: np.ndarray, t: int) -> np.ndarray:
        x = np.atleast_2d(x)
        return x + np.asarray(self.drift(x, t), dtype=float).reshape(x.shape)

    def log_density(self, y, x, t: int, u=None) -> np.ndarray:
        """Log density of ``y`` given ``x`` under control ``u`` (zero if omitted)."""
        mu = self.mean(np.asarray(x, dtype=float), t)
        if u is not None:
            mu = mu + np.asarray(u, dtype=float)
        r = np.atleast_2d(np.asarray(y, dtype=float)) - mu
        z = np.linalg.solve(self._chol, r.T)
        logdet = 2 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(z * z, axis=0) + logdet + self.dimension * np.log(2 * np.pi))


@dataclass(frozen=True)
class ControlSchedule:
    controls: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.controls, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.ndim != 2 or not np.all(np.isfinite(u)):
            raise ValidationError("controls must be a finite (T, n) array")
        object.__setattr__(self, "controls", u)

    @classmethod
    def zeros(cls, horizon: int, dimension: int) -> "ControlSchedule":
        return cls(np.zeros((horizon, dimension)))

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


@dataclass(frozen=True)
class PathCostSpec:
    """``state_cost(x, t)`` maps (batch, n) states to (batch,) costs for t = 0..T."""

    state_cost: StateCost
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be positive")

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        x = np.atleast_2d(x)
        r = np.broadcast_to(np.asarray(self.state_cost(x, t), dtype=float), (x.shape[0],))
        if np.any(np.isnan(r)) or np.any(r == -np.inf):
            raise ValidationError(f"state cost at t={t} returned NaN or -inf")
        return r


@dataclass(frozen=True)
class Estimate:
    value: float
    standard_error: float
    num_samples: int
    num_nonfinite: int = 0


# -- identities -------------------------------------------------------------------


def u_matrix_exponent(u, x, y, dynamics: ContinuousDynamics, t: int = 0) -> np.ndarray:
    """``(y - x - f(x,t))' nu^{-1} u - 0.5 u' nu^{-1} u``: the log ratio of controlled to free density."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    r = np.atleast_2d(np.asarray(y, dtype=float)) - dynamics.mean(np.asarray(x, dtype=float), t)
    P = dynamics.precision
    out = np.einsum("bi,ij,bj->b", r, P, u) - 0.5 * np.einsum("bi,ij,bj->b", u, P, u)
    return out if out.size > 1 else float(out[0])


def control_cost(u, dynamics: ContinuousDynamics) -> float:
    """``0.5 u' nu^{-1} u``, equal to KL(N(mu + u, nu) || N(mu, nu))."""
    u = np.asarray(u, dtype=float).ravel()
    return float(0.5 * u @ dynamics.precision @ u)


def gaussian_kl(mean_p, mean_q, cov) -> float:
    """KL between two Gaussians sharing covariance ``cov``."""
    d = np.asarray(mean_p, dtype=float) - np.asarray(mean_q, dtype=float)
    return float(0.5 * d @ np.linalg.solve(np.atleast_2d(cov), d))


# -- sampling ---------------------------------------------------------------------


def _block_sizes(num_samples: int) -> list[int]:
    full, rest = divmod(num_samples, BLOCK)
    return [BLOCK] * full + ([rest] if rest else [])


def _simulate_block(dynamics, cost, x0, schedule, size, seed_seq) -> np.ndarray:
    """Accumulated state cost of ``size`` trajectories (t = 0..T)."""
    rng = np.random.default_rng(seed_seq)
    n = dynamics.dimension
    x = np.repeat(np.atleast_2d(np.asarray(x0, dtype=float)), size, axis=0)
    total = cost(x, 0).copy()
    for t in range(cost.horizon):
        x = dynamics.mean(x, t) + rng.standard_normal((size, n)) @ dynamics._chol.T
        if schedule is not None:
            x = x + schedule.controls[t]
        total = total + cost(x, t + 1)
    return total


def sample_path_costs(dynamics: ContinuousDynamics, cost: PathCostSpec, x0, num_samples: int,
                      seed: int, schedule: Optional[ControlSchedule] = None, threads: int = 1) -> np.ndarray:
    """Total state cost per sampled trajectory, in a seed-determined order."""
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != dynamics.dimension:
        raise ValidationError(f"x0 has {x0.size} entries, dynamics have dimension {dynamics.dimension}")
    if schedule is not None and schedule.controls.shape != (cost.horizon, dynamics.dimension):
        raise ValidationError(f"schedule shape {schedule.controls.shape} does not match "
                              f"({cost.horizon}, {dynamics.dimension})")
    sizes = _block_sizes(num_samples)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    job = lambda args: _simulate_block(dynamics, cost, x0, schedule, *args)  # noqa: E731
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, zip(sizes, seeds)))
    else:
        parts = [job(a) for a in zip(sizes, seeds)]
    return np.concatenate(parts)


def expected_cost(schedule: ControlSchedule, dynamics: ContinuousDynamics, cost: PathCostSpec, x0,
                  num_samples: int, seed: int, threads: int = 1) -> Estimate:
    """Expected control plus state cost under ``schedule``.

    The control part is exact; only the state-cost expectation is sampled.
    Non-finite sampled costs are counted in the result and make the
    estimate infinite rather than being dropped.
    """
    if num_samples < 2:
        raise ValidationError("need at least two samples")
    analytic = sum(control_cost(u, dynamics) for u in schedule.controls)
    costs = sample_path_costs(dynamics, cost, x0, num_samples, seed, schedule, threads)
    bad = int(np.sum(~np.isfinite(costs)))
    if bad:
        return Estimate(np.inf, np.nan, num_samples, bad)
    if np.all(costs == costs[0]):
        return Estimate(analytic + float(costs[0]), 0.0, num_samples)
    return Estimate(analytic + float(np.mean(costs)), float(np.std(costs, ddof=1) / math.sqrt(num_samples)),
                    num_samples)


def mc_optimal_cost(dynamics: ContinuousDynamics, cost: PathCostSpec, x0, num_samples: int, seed: int,
                    threads: int = 1) -> Estimate:
    """Estimate ``-log Z`` with ``Z = E_free[exp(-sum_t R(x^t, t))]``.

    The standard error uses the delta method, ``sd(w) / (sqrt(N) Z)``, which
    is only a first-order approximation for heavy-tailed weights.
    """
    if num_samples < 100:
        raise ValidationError("need at least 100 samples")
    costs = sample_path_costs(dynamics, cost, x0, num_samples, seed, None, threads)
    logw = -costs
    top = float(np.max(logw))
    if top == -np.inf:
        raise EstimationError("every sampled path has infinite cost; Z estimate is zero")
    w = np.exp(logw - top)
    mean = float(np.mean(w))
    sd = float(np.std(w, ddof=1))
    return Estimate(-(top + math.log(mean)), sd / (math.sqrt(num_samples) * mean), num_samples,
                    int(np.sum(costs == np.inf)))


# -- built-ins --------------------------------------------------------------------


def linear_drift(A=None, b=None, dimension: int = 1) -> Drift:
    """``f(x) = A x + b``; zero when both are omitted."""
    A = np.zeros((dimension, dimension)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float).ravel()

    def drift(x, t):
        return x @ A.T + b

    return drift


def quadratic_cost(horizon: int, terminal=None, running=None, target=None, dimension: int = 1) -> PathCostSpec:
    """``0.5 (x - target)' Q (x - target)`` with ``Q = terminal`` at T and ``running`` at 1..T-1."""
    def mat(q):
        return np.zeros((dimension, dimension)) if q is None else np.atleast_2d(np.asarray(q, dtype=float))

    QT, QR = mat(terminal), mat(running)
    c = np.zeros(dimension) if target is None else np.asarray(target, dtype=float).ravel()

    def R(x, t):
        if t == 0:
            return np.zeros(x.shape[0])
        d = x - c
        Q = QT if t == horizon else QR
        return 0.5 * np.einsum("bi,ij,bj->b", d, Q, d)

    return PathCostSpec(R, horizon)


def quadratic_terminal_optimal_cost(alpha: float, horizon: int, x0: float, variance: float = 1.0) -> float:
    """Closed form ``-log Z`` for f = 0 in one dimension with terminal cost ``0.5 alpha x^2``."""
    s = alpha * variance * horizon
    return 0.5 * math.log1p(s) + alpha * x0 ** 2 / (2 * (1 + s))


# -- grid oracle ------------------------------------------------------------------


def discretize_1d(dynamics: ContinuousDynamics, cost: PathCostSpec, x0: float,
                  grid: Sequence[float]) -> tuple[ChainProblem, int]:
    """Project a one-dimensional problem onto a grid of cell centres.

    Each row of the kernel gives the free one-step probability of landing in
    each cell (cell edges halfway between centres, the outer cells extending
    to infinity).  Returns the chain and the cell index nearest ``x0``.
    """
    if dynamics.dimension != 1:
        raise ValidationError("grid discretisation needs a one-dimensional problem")
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ValidationError("grid must be strictly increasing with at least two points")
    sigma = math.sqrt(dynamics.noise_covariance[0, 0])
    edges = np.concatenate([[-np.inf], 0.5 * (g[1:] + g[:-1]), [np.inf]])
    T = cost.horizon
    kernel = np.empty((T, g.size, g.size))
    for t in range(T):
        mu = dynamics.mean(g[:, None], t)[:, 0]
        z = (edges[None, :] - mu[:, None]) / sigma
        lo, hi = log_ndtr(z[:, :-1]), log_ndtr(z[:, 1:])
        with np.errstate(divide="ignore"):
            cell = np.exp(hi) * -np.expm1(lo - hi)
        kernel[t] = cell / cell.sum(axis=1, keepdims=True)
    costs = np.stack([cost(g[:, None], t) for t in range(T + 1)])
    return ChainProblem(kernel, costs), int(np.argmin(np.abs(g - x0)))


def uniform_grid(x0: float, half_width: float, spacing: float) -> np.ndarray:
    """Evenly spaced grid through ``x0`` covering ``x0 +- half_width``."""
    k = int(math.ceil(half_width / spacing))
    return x0 + spacing * np.arange(-k, k + 1)
