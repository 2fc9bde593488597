"""Block stacking on a ring as a KL control problem.

``n`` locations on a ring hold ``m`` blocks; ``x_i`` is the height of stack
``i``.  At every step the free dynamics draw a location ``k`` uniformly from
1..n and a direction ``l`` uniformly from {-1, 0, +1}, and move one block from
``k`` to ``k + l`` (mod n).  Per-location indicators ``s_i`` in {-1, 0, +1}
record which stack loses and which gains a block; heights outside 0..m have
no support, so moves off an empty stack or onto a full one carry zero
weight.  The state cost is ``lambda`` times the entropy of the block
distribution, which is zero exactly when all blocks sit on one stack.

Locations and moves are reported 1-based (``k`` in 1..n, ``l`` in -1, 0, 1).
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from klcontrol import chain, cvm
from klcontrol.errors import ValidationError
from klcontrol.factored import (
    Auxiliary,
    ComponentSpec,
    CostFactor,
    FactoredProblem,
    assemble,
    auxiliary_marginals,
    export_factor_graph,
    flatten,
    variable_name,
)

log = logging.getLogger(__name__)

DIRECTIONS = (-1, 0, 1)


@dataclass(frozen=True)
class BlocksConfig:
    n: int
    m: int
    horizon: int
    strength: float
    initial_state: tuple[int, ...]
    solver: str = "exact"
    first_move_override: Optional[tuple[int, int]] = None
    cvm_options: cvm.DoubleLoopOptions = field(default_factory=cvm.DoubleLoopOptions)

    def __post_init__(self):
        object.__setattr__(self, "initial_state", tuple(int(v) for v in self.initial_state))
        if self.n < 2:
            raise ValidationError("need at least two locations on the ring")
        if self.m < 1 or self.horizon < 1:
            raise ValidationError("m and horizon must be positive")
        if self.strength < 0:
            raise ValidationError("strength must be nonnegative")
        if len(self.initial_state) != self.n:
            raise ValidationError(f"initial state needs {self.n} heights")
        if any(h < 0 or h > self.m for h in self.initial_state) or sum(self.initial_state) != self.m:
            raise ValidationError(f"initial heights {self.initial_state} must lie in 0..m and sum to m={self.m}")
        if self.solver not in ("exact", "cvm"):
            raise ValidationError(f"unknown solver {self.solver!r}")
        if self.first_move_override is not None:
            k, l = self.first_move_override
            if not 1 <= k <= self.n or l not in DIRECTIONS:
                raise ValidationError(f"override {self.first_move_override} is not a move")


def symmetric_initial_state(n: int, m: int) -> tuple[int, ...]:
    """m/2 blocks on two stacks maximally separated on the ring (locations 1 and 1 + n/2)."""
    if m % 2:
        raise ValidationError("symmetric initial state needs an even number of blocks")
    x = [0] * n
    x[0] = m // 2
    x[n // 2] += m // 2
    return tuple(x)


def entropy_cost(state: Sequence[int], strength: float, m: int) -> float:
    """``-strength * sum_i (x_i/m) log(x_i/m)`` with 0 log 0 = 0."""
    x = np.asarray(state, dtype=float)
    if np.any(x < 0) or x.sum() != m:
        raise ValidationError(f"state {tuple(state)} is not a placement of {m} blocks")
    frac = x[x > 0] / m
    return float(-strength * np.sum(frac * np.log(frac))) + 0.0


def height_cost(m: int, strength: float) -> np.ndarray:
    """Per-stack term of the entropy cost as a table over heights 0..m."""
    h = np.arange(m + 1) / m
    with np.errstate(divide="ignore", invalid="ignore"):
        return -strength * np.where(h > 0, h * np.log(h), 0.0)


def selector_table(n: int, i: int) -> np.ndarray:
    """``q(s_i | k, l)`` with shape (n, 3, 3); axis 1 and 2 index -1, 0, +1."""
    tab = np.zeros((n, 3, 3))
    for k in range(n):
        for li, l in enumerate(DIRECTIONS):
            if l != 0 and k == i:
                s = -1
            elif l != 0 and (k + l) % n == i:
                s = 1
            else:
                s = 0
            tab[k, li, s + 1] = 1.0
    return tab


def height_mixture(m: int) -> np.ndarray:
    """``q(x' | x, s) = delta(x' = x + s)`` over heights 0..m; out-of-range moves get no mass."""
    tab = np.zeros((m + 1, 3, m + 1))
    for x in range(m + 1):
        for si, s in enumerate(DIRECTIONS):
            if 0 <= x + s <= m:
                tab[x, si, x + s] = 1.0
    return tab


def build_model(config: BlocksConfig, horizon: Optional[int] = None,
                initial_state: Optional[Sequence[int]] = None) -> FactoredProblem:
    n, m = config.n, config.m
    T = config.horizon if horizon is None else horizon
    x0 = config.initial_state if initial_state is None else tuple(initial_state)
    auxs = [
        Auxiliary("k", n, np.full(n, 1.0 / n)),
        Auxiliary("l", 3, np.full(3, 1.0 / 3)),
    ]
    auxs += [Auxiliary(f"s{i + 1}", 3, selector_table(n, i), ("k", "l")) for i in range(n)]
    mix = height_mixture(m)
    comps = [ComponentSpec(f"x{i + 1}", m + 1, selectors=(f"s{i + 1}",), mixture=mix) for i in range(n)]
    r = height_cost(m, config.strength)
    factors = [CostFactor((f"x{i + 1}",), r) for i in range(n)]
    return assemble(comps, auxs, factors, T, x0, absorb_forbidden=True)


def apply_move(state: Sequence[int], k: int, l: int, m: int) -> tuple[int, ...]:
    """Move one block from stack ``k`` (1-based) to ``k + l``; raises if illegal."""
    x = list(state)
    if l == 0:
        return tuple(x)
    n = len(x)
    src, dst = k - 1, (k - 1 + l) % n
    if x[src] == 0 or x[dst] == m:
        raise ValidationError(f"move (k={k}, l={l}) is illegal from {tuple(state)}")
    x[src] -= 1
    x[dst] += 1
    return tuple(x)


def legal_moves(state: Sequence[int], m: int) -> np.ndarray:
    """Boolean (n, 3) mask of moves with nonzero free-dynamics probability."""
    n = len(state)
    ok = np.zeros((n, 3), dtype=bool)
    for k in range(n):
        for li, l in enumerate(DIRECTIONS):
            ok[k, li] = l == 0 or (state[k] > 0 and state[(k + l) % n] < m)
    return ok


@dataclass(frozen=True)
class StackState:
    heights: tuple[int, ...]
    m: int

    def __post_init__(self):
        object.__setattr__(self, "heights", tuple(int(h) for h in self.heights))
        if any(h < 0 or h > self.m for h in self.heights) or sum(self.heights) != self.m:
            raise ValidationError(f"heights {self.heights} are not a placement of {self.m} blocks")

    @property
    def is_goal(self) -> bool:
        return max(self.heights) == self.m


@dataclass(frozen=True)
class MoveVariables:
    k: int
    l: int
    s: tuple[int, ...]

    @classmethod
    def from_move(cls, k: int, l: int, n: int) -> "MoveVariables":
        if not 1 <= k <= n or l not in DIRECTIONS:
            raise ValidationError(f"({k}, {l}) is not a move on a ring of {n}")
        s = tuple(int(np.argmax(selector_table(n, i)[k - 1, l + 1])) - 1 for i in range(n))
        return cls(k, l, s)


# -- planning -------------------------------------------------------------------


@dataclass(frozen=True)
class Plan:
    """Per-slice posterior summaries of one planning solve.

    ``moves[t-1]`` is the joint p(k^t, l^t) as an (n, 3) table for t = 1..T;
    ``heights[i][t]`` is the marginal of x_i^t over 0..m for t = 0..T.
    """

    moves: np.ndarray
    heights: tuple
    cost: float
    solver: str
    status: str = "ok"
    diagnostic: str = ""
    wall_seconds: float = 0.0

    @property
    def horizon(self) -> int:
        return self.moves.shape[0]

    @property
    def p_k(self) -> np.ndarray:
        return self.moves.sum(axis=2)

    @property
    def p_l(self) -> np.ndarray:
        return self.moves.sum(axis=1)

    @property
    def expected_heights(self) -> np.ndarray:
        """(T+1, n) table of expected stack heights."""
        return np.stack([h @ np.arange(h.shape[1]) for h in self.heights], axis=1)


def _plan_exact(problem: FactoredProblem) -> tuple[np.ndarray, list, float]:
    flat = flatten(problem)
    sol = chain.solve(flat.chain, flat.index(problem.initial_state))
    moves = auxiliary_marginals(flat, chain.pair_marginals(sol), ("k", "l"))
    heights = flat.component_marginals(chain.state_marginals(sol))
    return moves, heights, sol.optimal_cost


def _plan_cvm(problem: FactoredProblem, options: cvm.DoubleLoopOptions, x0, m):
    fg = export_factor_graph(problem)
    res = cvm.solve_factor_graph(fg, options)
    T = problem.horizon
    moves = np.stack([
        cvm.marginals(res.beliefs, (variable_name("k", t), variable_name("l", t)))[0] for t in range(1, T + 1)
    ])
    heights = []
    for i, name in enumerate(problem.names):
        rows = [np.eye(m + 1)[x0[i]]]
        rows += [cvm.marginals(res.beliefs, variable_name(name, t))[0] for t in range(1, T + 1)]
        heights.append(np.stack(rows))
    # the graph weight carries exp(-R(x0, 0)) as its offset
    return moves, heights, res.free_energy - fg.log_offset, res


def plan(config: BlocksConfig, horizon: Optional[int] = None,
         initial_state: Optional[Sequence[int]] = None) -> Plan:
    """Solve the planning problem and summarise the optimal posterior slice by slice."""
    x0 = config.initial_state if initial_state is None else tuple(initial_state)
    problem = build_model(config, horizon, x0)
    start = time.perf_counter()
    if config.solver == "exact":
        moves, heights, cost = _plan_exact(problem)
        status, diagnostic = "ok", ""
    else:
        moves, heights, cost, res = _plan_cvm(problem, config.cvm_options, x0, config.m)
        status = "ok" if res.converged else "non-converged"
        diagnostic = res.diagnostic
    return Plan(np.asarray(moves), tuple(np.asarray(h) for h in heights), float(cost), config.solver,
                status, diagnostic, time.perf_counter() - start)


def map_move(moves: np.ndarray, state: Sequence[int], m: int, rtol: float = 1e-12) -> tuple[int, int]:
    """Joint MAP of an (n, 3) p(k, l) table over legal moves.

    Values within ``rtol`` of the maximum count as ties, broken by smallest k
    and then l in the order -1, 0, +1.
    """
    p = np.where(legal_moves(state, m), moves, -np.inf)
    best = p.max()
    k, li = np.argwhere(p >= best - rtol * abs(best))[0]
    return int(k) + 1, DIRECTIONS[li]


# -- rollout --------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutStep:
    t: int
    k: int
    l: int
    state: tuple[int, ...]
    plan: Plan
    overridden: bool = False

    @property
    def moved(self) -> bool:
        return self.l != 0


@dataclass(frozen=True)
class RolloutTrace:
    initial_state: tuple[int, ...]
    steps: tuple
    m: int
    strength: float = 1.0

    @property
    def states(self) -> list[tuple[int, ...]]:
        return [self.initial_state] + [s.state for s in self.steps]

    @property
    def num_moves(self) -> int:
        return sum(s.moved for s in self.steps)

    @property
    def reached_goal(self) -> bool:
        return max(self.states[-1]) == self.m

    @property
    def status(self) -> str:
        return "ok" if all(s.plan.status == "ok" for s in self.steps) else "non-converged"

    def to_csv(self) -> str:
        n = len(self.initial_state)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "k", "l", *[f"x{i + 1}" for i in range(n)], "state_cost", "status"])
        w.writerow([0, "", "", *self.initial_state, repr(entropy_cost(self.initial_state, self.strength, self.m)), ""])
        for s in self.steps:
            w.writerow([s.t, s.k, s.l, *s.state, repr(entropy_cost(s.state, self.strength, self.m)), s.plan.status])
        return buf.getvalue()


def receding_horizon_rollout(config: BlocksConfig, max_steps: Optional[int] = None) -> RolloutTrace:
    """Re-plan from the realised state each step and execute the MAP first move.

    Step ``t`` solves the remaining horizon ``T - t + 1``.  The first move is
    taken from ``config.first_move_override`` when given.  The rollout stops
    at ``T`` (or after ``max_steps`` steps) or once all blocks share a stack
    and the MAP move is ``l = 0``.
    """
    m = config.m
    state = config.initial_state
    if config.first_move_override is not None:
        k, l = config.first_move_override
        if not legal_moves(state, m)[k - 1, l + 1]:
            raise ValidationError(f"override (k={k}, l={l}) is illegal from {state}")
    steps = []
    last = config.horizon if max_steps is None else min(config.horizon, max_steps)
    for t in range(1, last + 1):
        p = plan(config, config.horizon - t + 1, state)
        overridden = t == 1 and config.first_move_override is not None
        k, l = config.first_move_override if overridden else map_move(p.moves[0], state, m)
        if max(state) == m and l == 0 and not overridden:
            log.info("goal reached at t=%d", t - 1)
            break
        state = apply_move(state, k, l, m)
        steps.append(RolloutStep(t, k, l, state, p, overridden))
        log.info("t=%d move (k=%d, l=%+d) -> %s [%s]", t, k, l, state, p.status)
    return RolloutTrace(config.initial_state, tuple(steps), m, config.strength)


# -- marginal grids -------------------------------------------------------------


def marginal_grids(p: Plan) -> dict[str, np.ndarray]:
    """Grids with one column per time slice, as in the usual posterior figures."""
    return {
        "p_k": p.p_k.T,
        "p_l": p.p_l.T,
        "expected_heights": p.expected_heights.T,
    }


def grid_to_csv(grid: np.ndarray, row_labels: Sequence, first_column: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", *[f"t{first_column + j}" for j in range(grid.shape[1])]])
    for label, row in zip(row_labels, grid):
        w.writerow([label, *[repr(float(v)) for v in row]])
    return buf.getvalue()


def grid_to_pgm(grid: np.ndarray, scale: int = 16, vmax: Optional[float] = None) -> str:
    """Plain (P2) graymap of a grid; darker pixels mean larger values."""
    g = np.asarray(grid, dtype=float)
    top = float(g.max()) if vmax is None else float(vmax)
    level = np.zeros_like(g) if top <= 0 else np.clip(g / top, 0.0, 1.0)
    pix = np.round(255 * (1.0 - level)).astype(int)
    pix = np.kron(pix, np.ones((scale, scale), dtype=int))
    lines = ["P2", f"{pix.shape[1]} {pix.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in pix]
    return "\n".join(lines) + "\n"


def marginal_rows(p: Plan) -> list[tuple[str, int, int, float]]:
    """Single-variable marginals as (variable, t, value, probability) for t = 1..T."""
    rows = []
    n = p.moves.shape[1]
    for t in range(1, p.horizon + 1):
        rows += [("k", t, k + 1, float(v)) for k, v in enumerate(p.p_k[t - 1])]
        rows += [("l", t, l, float(v)) for l, v in zip(DIRECTIONS, p.p_l[t - 1])]
        for i in range(n):
            rows += [(f"x{i + 1}", t, h, float(v)) for h, v in enumerate(p.heights[i][t])]
    return rows
