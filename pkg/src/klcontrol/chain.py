"""Exact KL control on finite-state Markov chains.

A problem is a free (uncontrolled) kernel ``q[t, x, y] = q^t(y|x)`` for
``t = 0..T-1`` and a state cost table ``R[t, x]`` for ``t = 0..T``.  The
optimal controlled trajectory distribution is ``psi / Z`` where ``psi`` is
the free path probability times ``exp(-sum_t R(x^t, t))``, and the optimal
expected cost from ``x0`` is ``-log Z(x0)``.

All message arithmetic happens in the log domain.  ``+inf`` costs encode
forbidden states and turn into exact zeros of the potentials.

Two oracles live here as well: the Bellman recursion written in value
function form, and brute-force enumeration of every trajectory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from klcontrol.errors import (
    BudgetExceededError,
    DeadStateError,
    InfeasibleError,
    SupportError,
    ValidationError,
)

STOCHASTIC_ATOL = 1e-12
DEFAULT_ENUMERATION_BUDGET = 10**7


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _safe_log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


@dataclass(frozen=True)
class ChainProblem:
    """Free dynamics ``kernel`` of shape (T, N, N) and costs ``state_cost`` of shape (T+1, N)."""

    kernel: np.ndarray
    state_cost: np.ndarray

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        cost = np.asarray(self.state_cost, dtype=float)
        if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
            raise ValidationError(f"kernel must have shape (T, N, N), got {kernel.shape}")
        T, N, _ = kernel.shape
        if T < 1 or N < 1:
            raise ValidationError("horizon and number of states must be positive")
        if cost.shape != (T + 1, N):
            raise ValidationError(
                f"state_cost must have shape (T+1, N) = {(T + 1, N)}, got {cost.shape}"
            )
        if not np.all(np.isfinite(kernel)):
            raise ValidationError("kernel contains non-finite entries")
        bad = np.argwhere(kernel < 0)
        if bad.size:
            t, x, y = bad[0]
            raise ValidationError(f"negative kernel entry at step {t}, row {x}, column {y}")
        row_err = np.abs(kernel.sum(axis=2) - 1.0)
        if np.any(row_err > STOCHASTIC_ATOL):
            t, x = np.unravel_index(np.argmax(row_err), row_err.shape)
            raise ValidationError(
                f"kernel row {x} at step {t} sums to {kernel[t, x].sum():.15g}, not 1"
            )
        if np.any(np.isnan(cost)):
            raise ValidationError("state_cost contains NaN")
        if np.any(cost == -np.inf):
            raise ValidationError("state_cost of -inf is not allowed")
        object.__setattr__(self, "kernel", _frozen(kernel))
        object.__setattr__(self, "state_cost", _frozen(cost))

    @property
    def num_states(self) -> int:
        return self.kernel.shape[1]

    @property
    def horizon(self) -> int:
        return self.kernel.shape[0]

    @classmethod
    def homogeneous(cls, kernel, state_cost, horizon: int) -> "ChainProblem":
        """Repeat a single (N, N) kernel for every step; ``state_cost`` may be (N,) or (T+1, N)."""
        kernel = np.asarray(kernel, dtype=float)
        cost = np.asarray(state_cost, dtype=float)
        if cost.ndim == 1:
            cost = np.broadcast_to(cost, (horizon + 1, cost.shape[0]))
        return cls(np.broadcast_to(kernel, (horizon,) + kernel.shape), cost)

    def _check_state(self, x: int) -> int:
        if not 0 <= int(x) < self.num_states:
            raise ValidationError(f"state {x} outside 0..{self.num_states - 1}")
        return int(x)


@dataclass(frozen=True)
class PairPotentialSet:
    """Pairwise potentials ``psi^t(x, y) = q^t(y|x) exp(-R(y, t+1))`` in log and linear form."""

    log_potentials: np.ndarray
    initial_cost: np.ndarray
    table: Optional[np.ndarray] = None

    @property
    def potentials(self) -> np.ndarray:
        return np.exp(self.log_potentials) if self.table is None else self.table

    @property
    def horizon(self) -> int:
        return self.log_potentials.shape[0]

    @property
    def num_states(self) -> int:
        return self.log_potentials.shape[1]


@dataclass(frozen=True)
class MessageSet:
    """Backward messages ``log beta[t, x]`` for t = 0..T and ``log Z`` per start state.

    ``log_Z`` includes the start cost, i.e. ``-log_Z[x0]`` is the optimal
    expected cost including ``R(x0, 0)``.
    """

    log_messages: np.ndarray
    log_Z: np.ndarray

    def optimal_cost(self, start: int) -> float:
        lz = float(self.log_Z[start])
        if lz == -np.inf:
            raise InfeasibleError(f"no finite-cost trajectory from state {start}")
        return -lz

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state", "log_message"])
        for t, row in enumerate(self.log_messages):
            for x, v in enumerate(row):
                w.writerow([t, x, repr(float(v))])
        return buf.getvalue()


@dataclass(frozen=True)
class ControlSolution:
    """Optimal transition distributions for one start state.

    ``step_distributions[t, x]`` is ``p(x^{t+1} | x^t = x)``; rows where
    ``defined[t, x]`` is False (dead states) are zero.
    """

    start: int
    step_distributions: np.ndarray
    defined: np.ndarray
    optimal_cost: float

    def to_csv(self) -> str:
        N = self.step_distributions.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "state", "defined"] + [f"p_next_{y}" for y in range(N)])
        for t in range(self.step_distributions.shape[0]):
            for x in range(N):
                row = self.step_distributions[t, x]
                w.writerow([t, x, int(self.defined[t, x])] + [repr(float(v)) for v in row])
        return buf.getvalue()


def build_potentials(problem: ChainProblem) -> PairPotentialSet:
    log_q = _safe_log(problem.kernel)
    log_psi = log_q - problem.state_cost[1:, None, :]
    log_psi = np.where(np.isnan(log_psi), -np.inf, log_psi)
    with np.errstate(over="ignore"):
        psi = problem.kernel * np.exp(-problem.state_cost[1:, None, :])
    return PairPotentialSet(_frozen(log_psi), _frozen(problem.state_cost[0]), _frozen(psi))


def backward_pass(potentials: PairPotentialSet) -> MessageSet:
    T, N = potentials.horizon, potentials.num_states
    log_beta = np.zeros((T + 1, N))
    for t in range(T - 1, -1, -1):
        log_beta[t] = logsumexp(potentials.log_potentials[t] + log_beta[t + 1][None, :], axis=1)
    log_Z = log_beta[0] - potentials.initial_cost
    log_Z = np.where(np.isnan(log_Z), -np.inf, log_Z)
    return MessageSet(_frozen(log_beta), _frozen(log_Z))


def optimal_step_distribution(
    messages: MessageSet, potentials: PairPotentialSet, state: int, time: int
) -> np.ndarray:
    """``p(y | x^time = state)`` proportional to ``psi^time(state, y) beta^{time+1}(y)``."""
    if not 0 <= time < potentials.horizon:
        raise ValidationError(f"time {time} outside 0..{potentials.horizon - 1}")
    w = potentials.log_potentials[time, state] + messages.log_messages[time + 1]
    norm = logsumexp(w)
    if norm == -np.inf:
        raise DeadStateError(f"state {state} at time {time} has no finite-cost continuation")
    return np.exp(w - norm)


def solve(problem: ChainProblem, start: int) -> ControlSolution:
    """Full optimal policy from ``start``; raises InfeasibleError if no finite-cost path exists."""
    start = problem._check_state(start)
    pots = build_potentials(problem)
    msgs = backward_pass(pots)
    cost = msgs.optimal_cost(start)
    w = pots.log_potentials + msgs.log_messages[1:, None, :]
    norm = logsumexp(w, axis=2)
    defined = norm > -np.inf
    with np.errstate(invalid="ignore"):
        dist = np.where(defined[..., None], np.exp(w - norm[..., None]), 0.0)
    return ControlSolution(start, _frozen(dist), defined, cost)


def state_marginals(solution: ControlSolution) -> np.ndarray:
    """Marginals ``p(x^t)`` for t = 0..T by composing the step distributions forward."""
    T, N, _ = solution.step_distributions.shape
    out = np.zeros((T + 1, N))
    out[0, solution.start] = 1.0
    for t in range(T):
        out[t + 1] = out[t] @ solution.step_distributions[t]
    return out


def pair_marginals(solution: ControlSolution) -> np.ndarray:
    """Joint marginals ``p(x^t, x^{t+1})`` with shape (T, N, N)."""
    marg = state_marginals(solution)
    return marg[:-1, :, None] * solution.step_distributions


def control_matrix(solution: ControlSolution, problem: ChainProblem) -> np.ma.MaskedArray:
    """``u^t_{xy} = log p^t(y|x) - log q^t(y|x)``, masked where q is zero or the row is dead."""
    mask = (problem.kernel == 0) | ~solution.defined[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = _safe_log(solution.step_distributions) - _safe_log(problem.kernel)
    u = np.where(mask, 0.0, u)
    return np.ma.masked_array(u, mask=mask)


def control_cost(u: np.ma.MaskedArray, problem: ChainProblem, start: int) -> float:
    """Expected cost of the controlled dynamics ``q exp(u)``: E[sum_t u^t + sum_t R(x^t, t)].

    Evaluated by forward propagation, so it is polynomial in the horizon.
    """
    T, N = problem.horizon, problem.num_states
    with np.errstate(over="ignore"):
        trans = np.where(np.ma.getmaskarray(u), 0.0, problem.kernel * np.exp(np.ma.filled(u, 0.0)))
    p = np.zeros(N)
    p[start] = 1.0
    total = _expect(p, problem.state_cost[0])
    for t in range(T):
        move_cost = np.where(trans[t] > 0, np.ma.filled(u[t], 0.0), 0.0)
        total += float(np.sum(p[:, None] * trans[t] * move_cost))
        p = p @ trans[t]
        total += _expect(p, problem.state_cost[t + 1])
    return total


def _expect(p: np.ndarray, cost: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * cost[nz]))


def _log_path_weights(problem: ChainProblem, start: int) -> np.ndarray:
    """Tensor over x^{1:T} of ``log q(path | start) - sum_{t=0}^T R(x^t, t)``."""
    T, N = problem.horizon, problem.num_states
    log_q = _safe_log(problem.kernel)
    out = np.array(log_q[0, start] - problem.state_cost[0, start] - problem.state_cost[1])
    for t in range(1, T):
        step = log_q[t] - problem.state_cost[t + 1][None, :]
        out = out[..., None] + step.reshape((1,) * (t - 1) + (N, N))
    return np.where(np.isnan(out), -np.inf, out)


@dataclass(frozen=True)
class EnumerationResult:
    log_Z: float
    marginals: np.ndarray
    path_distribution: np.ndarray

    @property
    def Z(self) -> float:
        return float(np.exp(self.log_Z))


def enumerate_oracle(
    problem: ChainProblem, start: int, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> EnumerationResult:
    """Brute-force Z and slice marginals by materializing every trajectory.

    ``path_distribution`` is the optimal p over x^{1:T} (shape (N,)*T);
    ``marginals`` has shape (T+1, N) with slice 0 the point mass on ``start``.
    """
    start = problem._check_state(start)
    T, N = problem.horizon, problem.num_states
    if N**T > budget:
        raise BudgetExceededError(f"{N}^{T} paths exceed the enumeration budget {budget}")
    logw = _log_path_weights(problem, start)
    log_Z = float(logsumexp(logw))
    if log_Z == -np.inf:
        raise InfeasibleError(f"no finite-cost trajectory from state {start}")
    p = np.exp(logw - log_Z)
    marg = np.zeros((T + 1, N))
    marg[0, start] = 1.0
    for t in range(T):
        axes = tuple(a for a in range(T) if a != t)
        marg[t + 1] = p.sum(axis=axes)
    return EnumerationResult(log_Z, marg, p)


def bellman_dp_oracle(problem: ChainProblem) -> np.ndarray:
    """Cost-to-go J[t, x] from the Bellman recursion specialised to KL control costs.

    The one-step minimisation over transition distributions p of
    ``sum_y p(y) (log p(y)/q(y|x) + J(y, t+1))`` has minimiser ``p ~ q exp(-J)``
    and minimum ``-log sum_y q(y|x) exp(-J(y, t+1))``.
    """
    T, N = problem.horizon, problem.num_states
    J = np.empty((T + 1, N))
    J[T] = problem.state_cost[T]
    for t in range(T - 1, -1, -1):
        for x in range(N):
            q = problem.kernel[t, x]
            nz = q > 0
            # -J may be -inf on forbidden successors; logsumexp handles that
            J[t, x] = problem.state_cost[t, x] - logsumexp(-J[t + 1, nz], b=q[nz])
    return J


def kl_control_cost(trajectory_distribution, problem: ChainProblem, start: int) -> float:
    """``sum_paths p log(p / psi)`` = KL(p || q) + <sum_t R>, with 0 log 0 = 0."""
    p = np.asarray(trajectory_distribution, dtype=float)
    T, N = problem.horizon, problem.num_states
    if p.shape != (N,) * T:
        raise ValidationError(f"trajectory table must have shape {(N,) * T}, got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
        raise ValidationError("trajectory distribution must be nonnegative and sum to 1")
    log_q = _safe_log(problem.kernel)
    log_q_path = log_q[0, start]
    for t in range(1, T):
        log_q_path = log_q_path[..., None] + log_q[t].reshape((1,) * (t - 1) + (N, N))
    log_q_path = np.broadcast_to(log_q_path, p.shape)
    support = p > 0
    if np.any(support & (log_q_path == -np.inf)):
        raise SupportError("distribution has mass on a path with zero free-dynamics probability")
    cost = np.broadcast_to(problem.state_cost[0, start], p.shape).copy()
    for t in range(1, T + 1):
        shape = [1] * T
        shape[t - 1] = N
        cost = cost + problem.state_cost[t].reshape(shape)
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - log_q_path[support] + cost[support])))


def random_problem(
    rng: np.random.Generator,
    num_states: int,
    horizon: int,
    cost_scale: float = 1.0,
    sparsity: float = 0.0,
) -> ChainProblem:
    """Random instance for testing; ``sparsity`` zeroes that fraction of kernel entries."""
    q = rng.random((horizon, num_states, num_states))
    if sparsity > 0:
        q = q * (rng.random(q.shape) >= sparsity)
        # keep every row nonempty
        idx = rng.integers(num_states, size=(horizon, num_states))
        q[np.arange(horizon)[:, None], np.arange(num_states)[None, :], idx] += 0.5
    q /= q.sum(axis=2, keepdims=True)
    R = cost_scale * rng.random((horizon + 1, num_states))
    return ChainProblem(q, R)


def optimal_start_cost(problem: ChainProblem, start: int) -> float:
    return backward_pass(build_potentials(problem)).optimal_cost(start)


__all__ = [
    "ChainProblem",
    "PairPotentialSet",
    "MessageSet",
    "ControlSolution",
    "EnumerationResult",
    "build_potentials",
    "backward_pass",
    "optimal_step_distribution",
    "solve",
    "state_marginals",
    "pair_marginals",
    "control_matrix",
    "control_cost",
    "enumerate_oracle",
    "bellman_dp_oracle",
    "kl_control_cost",
    "random_problem",
    "optimal_start_cost",
]

