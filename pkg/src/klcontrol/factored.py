"""KL control problems over a vector of components.

Each component ``x_i`` evolves by its own kernel, or by a mixture kernel
whose mixture weights come from per-step auxiliary selector variables shared
between components.  State costs are sums of factors over small scopes.

A problem can be flattened into a :class:`~klcontrol.chain.ChainProblem`
(joint states in mixed-radix order by component declaration, restricted to
the states reachable from ``initial_state`` when one is given), or exported as
a time-unrolled factor graph for approximate inference.

Mixture tables may leave some parent assignments with less than unit mass,
for instance when a selected move would push a component out of range.  With
``absorb_forbidden=True`` that lost mass is accepted: the flattened kernel is
renormalised and ``-log`` of the surviving mass is booked as an extra state
cost, so the potentials ``psi`` are exactly those of the local factor product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from klcontrol.chain import ChainProblem
from klcontrol.errors import BudgetExceededError, ValidationError
from klcontrol.factorgraph import FactorGraph

NORM_ATOL = 1e-12
DEFAULT_FLATTEN_BUDGET = 10**6


def _table(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Auxiliary:
    """Per-step selector with conditional ``table[*parent_values, value]``."""

    name: str
    cardinality: int
    table: np.ndarray
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "table", _table(self.table))
        object.__setattr__(self, "parents", tuple(self.parents))


@dataclass(frozen=True)
class ComponentSpec:
    """One state component.

    Either ``kernel`` (shape (c, c) or (T, c, c), rows ``q_i(y|x)``) or a
    mixture: ``mixture[x, *selector_values, y]`` conditioned on the auxiliary
    variables named in ``selectors``.
    """

    name: str
    cardinality: int
    kernel: Optional[np.ndarray] = None
    selectors: tuple[str, ...] = ()
    mixture: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kernel is not None:
            object.__setattr__(self, "kernel", _table(self.kernel))
        if self.mixture is not None:
            object.__setattr__(self, "mixture", _table(self.mixture))
        object.__setattr__(self, "selectors", tuple(self.selectors))

    def step_kernel(self, t: int) -> np.ndarray:
        return self.kernel if self.kernel.ndim == 2 else self.kernel[t]


@dataclass(frozen=True)
class CostFactor:
    """Cost ``R_alpha(x_alpha, t)``; ``table`` is (*cards) or (T+1, *cards).

    ``times`` restricts the slices where the factor applies (default: all).
    """

    scope: tuple[str, ...]
    table: np.ndarray
    times: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "scope", tuple(self.scope))
        object.__setattr__(self, "table", _table(self.table))
        if self.times is not None:
            object.__setattr__(self, "times", tuple(int(t) for t in self.times))

    def at(self, t: int) -> Optional[np.ndarray]:
        if self.times is not None and t not in self.times:
            return None
        return self.table[t] if self.table.ndim > len(self.scope) else self.table


@dataclass(frozen=True)
class FactoredProblem:
    components: tuple[ComponentSpec, ...]
    auxiliaries: tuple[Auxiliary, ...]
    factors: tuple[CostFactor, ...]
    horizon: int
    initial_state: Optional[tuple[int, ...]] = None
    absorb_forbidden: bool = False

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.components]

    @property
    def cardinalities(self) -> list[int]:
        return [c.cardinality for c in self.components]

    @property
    def time_varying(self) -> bool:
        return any(c.kernel is not None and c.kernel.ndim == 3 for c in self.components)

    def aux(self, name: str) -> Auxiliary:
        return {a.name: a for a in self.auxiliaries}[name]

    def state_cost(self, assignment: Sequence[int], t: int) -> float:
        pos = {n: i for i, n in enumerate(self.names)}
        total = 0.0
        for f in self.factors:
            tab = f.at(t)
            if tab is not None:
                total += float(tab[tuple(assignment[pos[v]] for v in f.scope)])
        return total


def assemble(
    components: Sequence[ComponentSpec],
    auxiliaries: Sequence[Auxiliary],
    factors: Sequence[CostFactor],
    horizon: int,
    initial_state: Optional[Sequence[int]] = None,
    absorb_forbidden: bool = False,
) -> FactoredProblem:
    """Validate names, shapes and local normalisation, and build the problem."""
    if horizon < 1:
        raise ValidationError("horizon must be positive")
    comps = tuple(components)
    auxs = tuple(auxiliaries)
    names = [c.name for c in comps] + [a.name for a in auxs]
    if len(set(names)) != len(names):
        raise ValidationError("component and auxiliary names must be unique")
    aux_card: dict[str, int] = {}
    for a in auxs:
        for p in a.parents:
            if p not in aux_card:
                raise ValidationError(
                    f"auxiliary {a.name!r} has parent {p!r} that is not an earlier auxiliary"
                )
        expected = tuple(aux_card[p] for p in a.parents) + (a.cardinality,)
        if a.table.shape != expected:
            raise ValidationError(f"auxiliary {a.name!r} table shape {a.table.shape} != {expected}")
        _check_conditional(a.table, f"auxiliary {a.name!r}", allow_deficit=False)
        aux_card[a.name] = a.cardinality
    for c in comps:
        if c.cardinality < 1:
            raise ValidationError(f"component {c.name!r} needs a positive cardinality")
        if (c.kernel is None) == (c.mixture is None):
            raise ValidationError(f"component {c.name!r} needs exactly one of kernel or mixture")
        k = c.cardinality
        if c.kernel is not None:
            ok = c.kernel.shape == (k, k) or c.kernel.shape == (horizon, k, k)
            if not ok:
                raise ValidationError(f"component {c.name!r} kernel shape {c.kernel.shape}")
            _check_conditional(c.kernel, f"component {c.name!r}", allow_deficit=False)
        else:
            for s in c.selectors:
                if s not in aux_card:
                    raise ValidationError(f"component {c.name!r} selector {s!r} is not declared")
            expected = (k,) + tuple(aux_card[s] for s in c.selectors) + (k,)
            if c.mixture.shape != expected:
                raise ValidationError(
                    f"component {c.name!r} mixture shape {c.mixture.shape} != {expected}"
                )
            _check_conditional(c.mixture, f"component {c.name!r}", allow_deficit=absorb_forbidden)
    card = {c.name: c.cardinality for c in comps}
    for f in factors:
        for v in f.scope:
            if v not in card:
                raise ValidationError(f"cost factor scope names undeclared component {v!r}")
        shape = tuple(card[v] for v in f.scope)
        if f.table.shape not in (shape, (horizon + 1,) + shape):
            raise ValidationError(f"cost factor over {f.scope} has table shape {f.table.shape}")
        if np.any(np.isnan(f.table)) or np.any(f.table == -np.inf):
            raise ValidationError(f"cost factor over {f.scope} has NaN or -inf entries")
    if initial_state is not None:
        initial_state = tuple(int(v) for v in initial_state)
        if len(initial_state) != len(comps):
            raise ValidationError("initial_state length differs from the number of components")
        for v, c in zip(initial_state, comps):
            if not 0 <= v < c.cardinality:
                raise ValidationError(f"initial value {v} out of range for {c.name!r}")
    return FactoredProblem(comps, auxs, tuple(factors), int(horizon), initial_state, absorb_forbidden)


def _check_conditional(table: np.ndarray, what: str, allow_deficit: bool) -> None:
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ValidationError(f"{what}: negative or non-finite probabilities")
    sums = table.sum(axis=-1)
    if np.any(sums > 1 + NORM_ATOL):
        raise ValidationError(f"{what}: conditional mass exceeds 1")
    if not allow_deficit and np.any(sums < 1 - NORM_ATOL):
        raise ValidationError(f"{what}: conditional is not normalised (non-normalised mixture)")


# -- flattening ---------------------------------------------------------------


@dataclass(frozen=True)
class FlattenedProblem:
    """A flat chain plus the bijection between its states and joint assignments."""

    chain: ChainProblem
    states: np.ndarray
    problem: FactoredProblem
    surviving_mass: np.ndarray

    @property
    def index_map(self) -> dict[tuple[int, ...], int]:
        return {tuple(int(v) for v in s): i for i, s in enumerate(self.states)}

    def index(self, assignment: Sequence[int]) -> int:
        try:
            return self.index_map[tuple(int(v) for v in assignment)]
        except KeyError:
            raise ValidationError(f"assignment {tuple(assignment)} is not a flattened state") from None

    def assignment(self, i: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.states[i])

    def component_marginals(self, state_marginals: np.ndarray) -> list[np.ndarray]:
        """Per-component marginals, each of shape (T+1, card), from flat marginals (T+1, S)."""
        out = []
        for i, c in enumerate(self.problem.cardinalities):
            onehot = np.zeros((len(self.states), c))
            onehot[np.arange(len(self.states)), self.states[:, i]] = 1.0
            out.append(state_marginals @ onehot)
        return out


def _radix(cards: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(cards), dtype=np.int64)
    for i in range(len(cards) - 2, -1, -1):
        strides[i] = strides[i + 1] * cards[i + 1]
    return strides


def _transition_tensor(
    problem: FactoredProblem,
    states: np.ndarray,
    t: int,
    keep: Sequence[str] = (),
) -> np.ndarray:
    """Sub-stochastic joint transition ``sum_aux P(aux) prod_i K_i(y_i | x_i, aux)``.

    Returns shape (B, *keep_cards, *component_cards): the auxiliaries in
    ``keep`` are left unsummed.
    """
    n = len(problem.components)
    aux_ids = {a.name: n + 1 + j for j, a in enumerate(problem.auxiliaries)}
    batch = 0
    operands: list = []
    for a in problem.auxiliaries:
        operands += [a.table, [aux_ids[p] for p in a.parents] + [aux_ids[a.name]]]
    for i, c in enumerate(problem.components):
        x = states[:, i]
        if c.mixture is not None:
            operands += [c.mixture[x], [batch] + [aux_ids[s] for s in c.selectors] + [1 + i]]
        else:
            operands += [c.step_kernel(t)[x], [batch, 1 + i]]
    out = [batch] + [aux_ids[k] for k in keep] + list(range(1, n + 1))
    return np.einsum(*operands, out, optimize="greedy")


def flatten(problem: FactoredProblem, budget: int = DEFAULT_FLATTEN_BUDGET) -> FlattenedProblem:
    """Flatten to a chain over joint states.

    With an ``initial_state`` only the states reachable from it under the
    free dynamics are kept (their successor set is closed by construction).
    """
    cards = problem.cardinalities
    total = int(np.prod(cards, dtype=object))
    if total > budget:
        raise BudgetExceededError(f"joint state space of size {total} exceeds budget {budget}")
    strides = _radix(cards)
    T = problem.horizon
    steps = range(T) if problem.time_varying else [0]

    if problem.initial_state is None:
        flat_ids = np.arange(total, dtype=np.int64)
    else:
        start = int(np.dot(problem.initial_state, strides))
        seen = {start}
        frontier = [start]
        while frontier:
            fr = np.array(frontier, dtype=np.int64)
            succ = np.zeros((len(fr), total), dtype=bool)
            for t in steps:
                succ |= _transition_tensor(problem, _decode(fr, cards), t).reshape(len(fr), total) > 0
            frontier = sorted(set(np.nonzero(succ)[1].tolist()) - seen)
            seen.update(frontier)
        flat_ids = np.array(sorted(seen), dtype=np.int64)

    states = _decode(flat_ids, cards)
    S = len(flat_ids)
    kernel = np.empty((T, S, S))
    mass = np.empty((T, S))
    for t in steps:
        full = _transition_tensor(problem, states, t).reshape(S, total)
        sub = full[:, flat_ids]
        leak = full.sum(axis=1) - sub.sum(axis=1)
        if np.any(leak > 1e-9):
            raise ValidationError("free dynamics leave the flattened state set")
        kernel[t], mass[t] = sub, sub.sum(axis=1)
    if not problem.time_varying:
        kernel[:], mass[:] = kernel[0], mass[0]

    if not problem.absorb_forbidden and np.any(np.abs(mass - 1) > 1e-10):
        raise ValidationError("non-normalised mixture: joint transition mass differs from 1")

    cost = np.zeros((T + 1, S))
    for t in range(T + 1):
        for f in problem.factors:
            tab = f.at(t)
            if tab is not None:
                pos = [problem.names.index(v) for v in f.scope]
                cost[t] += tab[tuple(states[:, p] for p in pos)]
    dead = mass <= 0
    with np.errstate(divide="ignore"):
        cost[:T] -= np.where(dead, -np.inf, np.log(np.where(dead, 1.0, mass)))
    kernel = np.where(dead[..., None], 0.0, kernel / np.where(dead, 1.0, mass)[..., None])
    for t, x in zip(*np.nonzero(dead)):
        kernel[t, x, x] = 1.0
    return FlattenedProblem(ChainProblem(kernel, cost), states, problem, mass)


def _decode(ids: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    strides = _radix(cards)
    return (ids[:, None] // strides[None, :]) % np.asarray(cards)[None, :]


def auxiliary_marginals(
    flat: FlattenedProblem,
    pair_marginals: np.ndarray,
    names: Sequence[str],
    times: Optional[Sequence[int]] = None,
    batch: int = 16,
) -> np.ndarray:
    """Joint posterior of auxiliaries ``names`` at each step ``t+1`` for t in ``times``.

    ``pair_marginals[t, x, y]`` is the optimal ``p(x^t = x, x^{t+1} = y)`` of the
    flat chain.  Given a transition (x, y) the selectors have posterior
    proportional to their prior times the component likelihoods.
    Returns shape (len(times), *cards_of_names).
    """
    problem = flat.problem
    T = problem.horizon
    times = list(range(T)) if times is None else list(times)
    cards = problem.cardinalities
    total = int(np.prod(cards))
    ids = (flat.states * _radix(cards)[None, :]).sum(axis=1)
    keep_cards = tuple(problem.aux(n).cardinality for n in names)
    S = len(flat.states)
    out = np.zeros((len(times),) + keep_cards)
    for lo in range(0, S, batch):
        xs = flat.states[lo : lo + batch]
        joint = None
        for t_i, t in enumerate(times):
            if joint is None or problem.time_varying:
                joint = _transition_tensor(problem, xs, t, keep=names)
                joint = joint.reshape((len(xs),) + keep_cards + (total,))[..., ids]
                denom = joint.reshape(len(xs), -1, S).sum(axis=1)
            w = pair_marginals[t, lo : lo + batch]
            ratio = np.divide(w, denom, out=np.zeros_like(w), where=denom > 0)
            out[t_i] += np.einsum("b...y,by->...", joint, ratio)
    return out


# -- factor graph export --------------------------------------------------------


def variable_name(name: str, t: int) -> str:
    return f"{name}@{t}"


def export_factor_graph(problem: FactoredProblem) -> FactorGraph:
    """Time-unrolled factor graph for slices 1..T with the initial state clamped.

    Auxiliaries and components become variables ``name@t``.  Factors are the
    auxiliary conditionals, the component transitions (first slice reduced on
    ``x^0``) and ``exp(-R_alpha)`` for every cost factor at t = 1..T.  The
    slice-0 cost is the constant ``log_offset``.
    """
    if problem.initial_state is None:
        raise ValidationError("exporting a factor graph requires an initial_state")
    x0 = problem.initial_state
    T = problem.horizon
    cards: dict[str, int] = {}
    for t in range(1, T + 1):
        for a in problem.auxiliaries:
            cards[variable_name(a.name, t)] = a.cardinality
        for c in problem.components:
            cards[variable_name(c.name, t)] = c.cardinality
    log_offset = -problem.state_cost(x0, 0)
    fg = FactorGraph(cards, [], log_offset)
    for t in range(1, T + 1):
        for a in problem.auxiliaries:
            fg.add([variable_name(p, t) for p in a.parents] + [variable_name(a.name, t)], a.table)
        for i, c in enumerate(problem.components):
            sel = [variable_name(s, t) for s in c.selectors]
            table = c.mixture if c.mixture is not None else c.step_kernel(t - 1)
            if t == 1:
                fg.add(sel + [variable_name(c.name, 1)], table[x0[i]])
            else:
                fg.add([variable_name(c.name, t - 1)] + sel + [variable_name(c.name, t)], table)
        for f in problem.factors:
            tab = f.at(t)
            if tab is not None:
                with np.errstate(over="ignore"):
                    fg.add([variable_name(v, t) for v in f.scope], np.exp(-tab))
    return fg
