"""Cluster variation method with a guaranteed-descent double loop.

Outer clusters are the (maximal) factor scopes; sub-clusters are all
intersections of clusters, closed under further intersection.  Counting
numbers come from the Moebius recursion ``sum_{alpha >= beta} a_alpha = 1``
and are exact integers.

The free energy

    F = sum_{alpha in B} sum p_alpha log(p_alpha / psi_alpha)
        + sum_{beta in M} a_beta sum p_beta log p_beta

is minimised under normalisation and marginal consistency.  Each outer step
builds a convex upper bound that touches F at the current beliefs.  The
entropy of a sub-cluster with ``a_beta < 0`` is concave in F; as much of it
as the outer-cluster entropies can absorb while staying convex is kept
exactly, and the remainder is replaced by its tangent.  Keeping part of it
lets information travel along chains far faster than full linearisation.
The bound is minimised by block coordinate ascent on the dual (one block per
sub-cluster, updating all outer clusters containing it), warm-started from
the previous outer step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from klcontrol.errors import ValidationError
from klcontrol.factorgraph import FactorGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DoubleLoopOptions:
    inner_iterations: int = 50
    outer_tolerance: float = 1e-5
    max_outer: int = 10000
    damping: float = 0.0
    inner_tolerance: float = 1e-8
    consistency_tolerance: float = 1e-6
    belief_floor: float = 1e-300
    # extra batches of inner_iterations sweeps allowed when the inner loop is not yet consistent
    retry_rounds: int = 10
    check_bound: bool = False

    def __post_init__(self):
        if self.outer_tolerance <= 0 or self.inner_tolerance <= 0:
            raise ValidationError("tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValidationError("damping must lie in [0, 1)")
        if self.inner_iterations < 1 or self.max_outer < 0:
            raise ValidationError("iteration counts must be positive")


# -- region graph -------------------------------------------------------------


@dataclass(frozen=True)
class RegionGraph:
    """Regions as variable tuples; the first ``num_outer`` are the outer clusters."""

    cardinalities: dict
    regions: tuple
    num_outer: int
    counting_numbers: tuple
    supersets: tuple
    outer_parents: tuple

    @property
    def outer(self) -> range:
        return range(self.num_outer)

    @property
    def inner(self) -> range:
        return range(self.num_outer, len(self.regions))

    def shape(self, r: int) -> tuple[int, ...]:
        return tuple(self.cardinalities[v] for v in self.regions[r])

    def index(self, variables: Sequence[str]) -> int:
        key = frozenset(variables)
        for i, reg in enumerate(self.regions):
            if frozenset(reg) == key:
                return i
        raise KeyError(tuple(variables))

    def covering(self, variables: Sequence[str]) -> list[int]:
        need = set(variables)
        return [i for i, reg in enumerate(self.regions) if need <= set(reg)]

    def mobius_residuals(self) -> list[int]:
        """``sum_{alpha >= beta} a_alpha - 1`` per region; all zero for a valid graph."""
        a = self.counting_numbers
        return [a[b] + sum(a[s] for s in self.supersets[b]) - 1 for b in range(len(self.regions))]


def build_region_graph(factor_graph: FactorGraph) -> RegionGraph:
    """Outer clusters = distinct maximal factor scopes; sub-clusters = intersection closure."""
    order = {v: i for i, v in enumerate(factor_graph.cardinalities)}
    scopes: list[frozenset] = []
    for f in factor_graph.factors:
        s = frozenset(f.scope)
        if s and s not in scopes:
            scopes.append(s)
    outer = [s for s in scopes if not any(s < o for o in scopes)]

    regions = list(outer)
    known = set(outer)
    by_var: dict[str, set[int]] = {}
    for i, r in enumerate(regions):
        for v in r:
            by_var.setdefault(v, set()).add(i)
    frontier = list(range(len(regions)))
    while frontier:
        new: list[frozenset] = []
        for i in frontier:
            partners = set().union(*(by_var[v] for v in regions[i])) - {i}
            for j in partners:
                cut = regions[i] & regions[j]
                if cut and cut not in known:
                    known.add(cut)
                    new.append(cut)
        frontier = []
        for r in sorted(new, key=lambda r: (-len(r), sorted(order[v] for v in r))):
            regions.append(r)
            idx = len(regions) - 1
            for v in r:
                by_var[v].add(idx)
            frontier.append(idx)

    inner = sorted(regions[len(outer):], key=lambda r: (-len(r), sorted(order[v] for v in r)))
    regions = outer + inner
    by_var = {}
    for i, r in enumerate(regions):
        for v in r:
            by_var.setdefault(v, set()).add(i)
    supersets = []
    for i, r in enumerate(regions):
        sup = set.intersection(*(by_var[v] for v in r)) - {i}
        supersets.append(tuple(sorted(sup)))

    counting = [0] * len(regions)
    for i in sorted(range(len(regions)), key=lambda i: -len(regions[i])):
        counting[i] = 1 - sum(counting[s] for s in supersets[i])
    n_out = len(outer)
    outer_parents = tuple(tuple(s for s in supersets[i] if s < n_out) for i in range(len(regions)))
    ordered = tuple(tuple(sorted(r, key=order.__getitem__)) for r in regions)
    return RegionGraph(
        dict(factor_graph.cardinalities), ordered, n_out, tuple(counting), tuple(supersets), outer_parents
    )


def cluster_log_potentials(region_graph: RegionGraph, factor_graph: FactorGraph) -> list[np.ndarray]:
    """``log psi_alpha`` per outer cluster; each factor goes to the first cluster containing it."""
    out = [np.zeros(region_graph.shape(a)) for a in region_graph.outer]
    for f in factor_graph.factors:
        scope = set(f.scope)
        home = next(a for a in region_graph.outer if scope <= set(region_graph.regions[a]))
        reg = region_graph.regions[home]
        perm = sorted(range(len(f.scope)), key=lambda j: reg.index(f.scope[j]))
        with np.errstate(divide="ignore"):
            lt = np.log(np.transpose(f.table, perm))
        shape = [region_graph.cardinalities[v] if v in scope else 1 for v in reg]
        out[home] = out[home] + lt.reshape(shape)
    return out


# -- beliefs and free energy ----------------------------------------------------


@dataclass(frozen=True)
class BeliefSet:
    region_graph: RegionGraph
    beliefs: tuple
    lagrange_state: dict = field(default_factory=dict)

    def __getitem__(self, r: int) -> np.ndarray:
        return self.beliefs[r]

    def max_violation(self) -> float:
        return _max_violation(self.region_graph, self.beliefs)


def _sum_axes(parent: Sequence[str], child: Sequence[str]) -> tuple[int, ...]:
    return tuple(i for i, v in enumerate(parent) if v not in child)


def _bshape(rg: RegionGraph, parent: Sequence[str], child: Sequence[str]) -> tuple[int, ...]:
    return tuple(rg.cardinalities[v] if v in child else 1 for v in parent)


def _max_violation(rg: RegionGraph, beliefs: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for b in rg.inner:
        for a in rg.outer_parents[b]:
            m = beliefs[a].sum(axis=_sum_axes(rg.regions[a], rg.regions[b]))
            worst = max(worst, float(np.max(np.abs(m - beliefs[b]))))
    return worst


def _neg_entropy(p: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz])))


def _energy(p: np.ndarray, log_psi: np.ndarray) -> float:
    nz = p > 0
    if np.any(log_psi[nz] == -np.inf):
        return np.inf
    return float(np.sum(p[nz] * (np.log(p[nz]) - log_psi[nz])))


def cvm_free_energy(region_graph: RegionGraph, beliefs, log_potentials: Sequence[np.ndarray]) -> float:
    """F_cvm for beliefs over every region (outer first), with 0 log 0 = 0."""
    rg = region_graph
    beliefs = beliefs.beliefs if isinstance(beliefs, BeliefSet) else beliefs
    for p in beliefs:
        if np.any(p < 0):
            raise ValidationError("beliefs must be nonnegative")
    total = sum(_energy(beliefs[a], log_potentials[a]) for a in rg.outer)
    for b in rg.inner:
        if rg.counting_numbers[b]:
            total += rg.counting_numbers[b] * _neg_entropy(beliefs[b])
    return float(total)


def convex_bound(
    region_graph: RegionGraph,
    beliefs,
    log_potentials: Sequence[np.ndarray],
    linearization_point,
    floor: float = 1e-300,
    kappa: Optional[dict] = None,
) -> float:
    """The convex upper bound of F_cvm touching at ``linearization_point``.

    Of each sub-cluster entropy with negative counting number, the part
    ``kappa`` (see :func:`convex_allocation`) is kept exactly and the rest is
    replaced by the cross entropy against the linearisation point's beliefs.
    """
    rg = region_graph
    if kappa is None:
        kappa = convex_allocation(rg)
    beliefs = beliefs.beliefs if isinstance(beliefs, BeliefSet) else beliefs
    ref = linearization_point.beliefs if isinstance(linearization_point, BeliefSet) else linearization_point
    total = sum(_energy(beliefs[a], log_potentials[a]) for a in rg.outer)
    for b in rg.inner:
        c = rg.counting_numbers[b]
        if c > 0:
            total += c * _neg_entropy(beliefs[b])
        elif c < 0:
            p = beliefs[b]
            nz = p > 0
            kb = kappa.get(b, 0.0)
            total -= kb * _neg_entropy(p)
            total += (c + kb) * float(np.sum(p[nz] * np.log(np.maximum(ref[b][nz], floor))))
    return float(total)


def random_feasible_beliefs(region_graph: RegionGraph, rng: np.random.Generator,
                            support: Optional[Sequence[np.ndarray]] = None) -> list[np.ndarray]:
    """Consistent beliefs obtained as region marginals of a random joint distribution.

    Only practical for graphs whose full joint table is small.  With
    ``support`` (outer log potentials) the joint vanishes wherever some
    potential does.
    """
    rg = region_graph
    names = list(rg.cardinalities)
    shape = tuple(rg.cardinalities[v] for v in names)
    joint = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    if support is not None:
        for a in rg.outer:
            reg = rg.regions[a]
            bshape = [rg.cardinalities[v] if v in reg else 1 for v in names]
            joint = joint * (support[a] > -np.inf).reshape(bshape)
        joint /= joint.sum()
    out = []
    for reg in rg.regions:
        axes = tuple(i for i, v in enumerate(names) if v not in reg)
        out.append(joint.sum(axis=axes))
    return out


# -- double loop --------------------------------------------------------------


@dataclass(frozen=True)
class CVMResult:
    beliefs: BeliefSet
    free_energy: float
    trace: tuple
    status: str
    outer_iterations: int
    max_violation: float
    descent_chain: tuple
    diagnostic: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def convex_allocation(region_graph: RegionGraph) -> dict[int, float]:
    """How much of each negative sub-cluster entropy can stay in the convex part.

    ``-S_alpha + S_beta`` is convex in ``p_alpha`` for ``beta`` inside
    ``alpha``, so an outer cluster can absorb a total weight of at most one
    of its sub-clusters' entropies.  The largest total absorption is found by
    a small linear program; the result maps sub-cluster index to the kept
    weight ``kappa_beta`` in ``[0, -a_beta]``.
    """
    rg = region_graph
    pairs = [(a, b) for b in rg.inner if rg.counting_numbers[b] < 0 for a in rg.outer_parents[b]]
    if not pairs:
        return {}
    outer_rows = {a: i for i, a in enumerate(sorted({a for a, _ in pairs}))}
    negs = sorted({b for _, b in pairs})
    inner_rows = {b: i for i, b in enumerate(negs)}
    cols = np.arange(len(pairs))
    data = np.ones(len(pairs))
    Aa = sparse.csr_matrix((data, ([outer_rows[a] for a, _ in pairs], cols)), shape=(len(outer_rows), len(pairs)))
    Ab = sparse.csr_matrix((data, ([inner_rows[b] for _, b in pairs], cols)), shape=(len(negs), len(pairs)))
    need = np.array([-rg.counting_numbers[b] for b in negs], dtype=float)
    ones = np.ones(len(outer_rows))
    first = linprog(-np.ones(len(pairs)), A_ub=sparse.vstack([Aa, Ab]).tocsr(), b_ub=np.concatenate([ones, need]),
                    bounds=(0, 1), method="highs")
    kappa = {b: 0.0 for b in negs}
    if first.status != 0:
        return kappa
    # among maximal allocations, spread the kept weight as evenly as possible:
    # maximise t with kappa_b >= t * need_b, which speeds up the inner loop
    A = sparse.vstack([
        sparse.hstack([Aa, sparse.csr_matrix((len(outer_rows), 1))]),
        sparse.hstack([Ab, sparse.csr_matrix((len(negs), 1))]),
        sparse.hstack([-Ab, sparse.csr_matrix(need[:, None])]),
        sparse.csr_matrix(np.concatenate([-np.ones(len(pairs)), [0.0]])[None, :]),
    ]).tocsr()
    ub = np.concatenate([ones, need, np.zeros(len(negs)), [first.fun + 1e-9]])
    cost = np.zeros(len(pairs) + 1)
    cost[-1] = -1.0
    second = linprog(cost, A_ub=A, b_ub=ub, bounds=(0, 1), method="highs")
    x = second.x[:-1] if second.status == 0 else first.x
    for (a, b), v in zip(pairs, x):
        kappa[b] += max(float(v), 0.0)
    for b in negs:
        # an exponent above one in the inner update would overshoot
        kappa[b] = min(kappa[b], -rg.counting_numbers[b], len(rg.outer_parents[b]) - 1.0)
    return kappa


class _Inner:
    """Message passing on the convex bound, one block per sub-cluster.

    ``counting[b]`` is the effective counting number of sub-cluster ``b`` in
    the convex part.  Messages ``lam[(a, b)]`` from ``b`` into outer cluster
    ``a`` are kept in the log domain; the outer beliefs stay normalised in the
    probability domain and are rescaled in place as messages change.
    """

    def __init__(self, rg: RegionGraph, options: DoubleLoopOptions, counting: dict[int, float]):
        self.rg = rg
        self.options = options
        self.forward = False
        self.blocks = []
        for b in rg.inner:
            links = []
            for a in rg.outer_parents[b]:
                links.append((a, _sum_axes(rg.regions[a], rg.regions[b]),
                              _bshape(rg, rg.regions[a], rg.regions[b])))
            self.blocks.append((b, 1.0 / (len(links) + counting[b]), links))
        self.lam = {(a, b): np.zeros(rg.shape(b)) for b, _, links in self.blocks for a, _, _ in links}

    def sweeps(self, p: list, count: int) -> tuple[int, float]:
        opts = self.options
        keep = 1.0 - opts.damping
        lam = self.lam
        viol = np.inf
        # Zero entries of an outer belief stay zero, so messages there are
        # irrelevant and kept finite; log(0) = -inf then marks them dead.
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for it in range(count):
                viol = 0.0
                # alternate the sweep direction so information travels both ways along time
                self.forward = not self.forward
                for b, power, links in (self.blocks if self.forward else reversed(self.blocks)):
                    mus = [p[a].sum(axis=ax) for a, ax, _ in links]
                    logt = np.log(mus[0]) - lam[(links[0][0], b)]
                    for mu, (a, _, _) in zip(mus[1:], links[1:]):
                        logt += np.log(mu) - lam[(a, b)]
                    logt *= power
                    top = logt.max()
                    if top == -np.inf:
                        raise ValidationError(f"region {self.rg.regions[b]} has no admissible state")
                    t = np.exp(logt - top)
                    t /= t.sum()
                    for (a, _, shape), mu in zip(links, mus):
                        d = float(np.abs(mu - t).max())
                        if d > viol:
                            viol = d
                        ratio = np.divide(t, mu, out=np.zeros_like(t), where=mu > 0)
                        if keep != 1.0:
                            ratio **= keep
                        pa = p[a] * ratio.reshape(shape)
                        p[a] = pa / pa.sum()
                        lam[(a, b)] += np.log(ratio, out=np.zeros_like(ratio), where=ratio > 0)
                if viol < opts.inner_tolerance:
                    return it + 1, viol
        return count, viol

    def inner_beliefs(self, p: list) -> list:
        out = []
        for b, _, links in self.blocks:
            m = sum(p[a].sum(axis=ax) for a, ax, _ in links) / len(links)
            out.append(m / m.sum())
        return out


def _normalise_log(lp: np.ndarray) -> np.ndarray:
    top = np.max(lp)
    p = np.exp(lp - top)
    return p / p.sum()


def double_loop_minimize(
    region_graph: RegionGraph,
    log_potentials: Sequence[np.ndarray],
    options: DoubleLoopOptions = DoubleLoopOptions(),
    rng: Optional[np.random.Generator] = None,
) -> CVMResult:
    """Minimise F_cvm by the double loop; the trace of accepted outer steps never increases.

    Each outer step minimises a convex upper bound touching F_cvm at the
    current beliefs: negative-count sub-cluster entropies are kept exactly up
    to the weight given by :func:`convex_allocation` and linearised beyond
    it.  The inner loop runs rounds of ``inner_iterations`` sweeps until the
    beliefs are consistent, with at most ``retry_rounds`` extra rounds.  A
    step that fails to lower F (possible only when the inner loop stopped
    early) is rejected and the run stops; it counts as ``converged`` only if
    the attempted change was within ``outer_tolerance`` and the beliefs are
    consistent.
    """
    rg = region_graph
    opts = options
    if len(log_potentials) != rg.num_outer:
        raise ValidationError("need one log potential table per outer cluster")
    for a in rg.outer:
        if np.all(log_potentials[a] == -np.inf):
            raise ValidationError(f"cluster {rg.regions[a]} has an all-zero potential")
    kappa = convex_allocation(rg)
    counting = {b: float(max(rg.counting_numbers[b], 0)) - kappa.get(b, 0.0) for b in rg.inner}
    inner = _Inner(rg, opts, counting)
    # linearised weight per outer parent of each negative sub-cluster
    neg = [(b, (-rg.counting_numbers[b] - kappa[b]) / len(rg.outer_parents[b]))
           for b in rg.inner if rg.counting_numbers[b] < 0]
    links = {b: lk for b, _, lk in inner.blocks}

    def settle(p):
        # sweep in rounds of inner_iterations until consistent or out of rounds
        for _ in range(opts.retry_rounds + 1):
            _, viol = inner.sweeps(p, opts.inner_iterations)
            if viol < opts.inner_tolerance:
                break
        return viol

    p = [_normalise_log(lp) for lp in log_potentials]
    viol = settle(p)
    ib = inner.inner_beliefs(p)
    beliefs = p + ib
    F = cvm_free_energy(rg, beliefs, log_potentials)
    trace = [F]
    chain_rec = []
    lin_old = {b: np.zeros(rg.shape(b)) for b, _ in neg}
    status, diagnostic = "non-converged", f"max_outer={opts.max_outer} reached"
    outer_it = 0

    for outer_it in range(1, opts.max_outer + 1):
        x0 = list(beliefs)
        saved_p = [q.copy() for q in p]
        saved_lam = {k: v.copy() for k, v in inner.lam.items()}
        lin_new = {b: np.log(np.maximum(x0[b], opts.belief_floor)) for b, _ in neg}
        logp = [np.log(np.where(q > 0, q, 1.0)) for q in p]
        for b, w in neg:
            delta = w * (lin_new[b] - lin_old[b])
            for a, _, shape in links[b]:
                logp[a] = logp[a] + delta.reshape(shape)
        p = [np.where(q > 0, _normalise_log(np.where(q > 0, lp, -np.inf)), 0.0) for q, lp in zip(p, logp)]

        viol = settle(p)
        cand = p + inner.inner_beliefs(p)
        F_new = cvm_free_energy(rg, cand, log_potentials)

        if F_new > F:
            p, inner.lam = saved_p, saved_lam
            viol = _max_violation(rg, beliefs)
            noise = 1e-10 * max(1.0, abs(F))
            if (F_new - F < opts.outer_tolerance or F_new - F <= noise) and viol < opts.consistency_tolerance:
                status, diagnostic = "converged", "stationary: further steps within tolerance"
            else:
                status = "non-converged"
                diagnostic = f"outer step failed to descend (F change {F_new - F:.3e})"
            break

        bound_start = F
        bound_end = convex_bound(rg, cand, log_potentials, x0, opts.belief_floor, kappa)
        chain_rec.append((bound_start, bound_end, F_new))
        if opts.check_bound:
            _spot_check_bound(rg, log_potentials, x0, opts.belief_floor, rng or np.random.default_rng(0), kappa)
        lin_old = lin_new
        beliefs = cand
        change = F - F_new
        F = F_new
        trace.append(F)
        if change < opts.outer_tolerance and viol < opts.consistency_tolerance:
            status, diagnostic = "converged", ""
            break

    viol = _max_violation(rg, beliefs)
    if status == "non-converged":
        log.warning("CVM did not converge: %s (F=%.6g, max violation %.3g)", diagnostic, F, viol)
    lag = {"multipliers": dict(inner.lam), "linearization": lin_old}
    return CVMResult(
        BeliefSet(rg, tuple(beliefs), lag), F, tuple(trace), status, outer_it, viol,
        tuple(chain_rec), diagnostic,
    )


def _spot_check_bound(rg, log_potentials, x0, floor, rng, kappa=None, samples: int = 20) -> None:
    F0 = cvm_free_energy(rg, x0, log_potentials)
    touch = convex_bound(rg, x0, log_potentials, x0, floor, kappa)
    if abs(touch - F0) > 1e-12 * max(1.0, abs(F0)):
        raise AssertionError(f"bound does not touch: {touch} vs {F0}")
    for _ in range(samples):
        x = random_feasible_beliefs(rg, rng, log_potentials)
        if convex_bound(rg, x, log_potentials, x0, floor, kappa) < cvm_free_energy(rg, x, log_potentials) - 1e-12:
            raise AssertionError("convex bound below F_cvm at a feasible point")


# -- marginals ----------------------------------------------------------------


def marginals(beliefs: BeliefSet, variables) -> tuple[np.ndarray, float]:
    """Marginal over one variable (or a tuple of variables) and the covering-region discrepancy.

    The marginal comes from the smallest region containing the variables;
    the second value is the largest absolute difference between the
    marginals implied by all covering regions.
    """
    rg = beliefs.region_graph
    vars_ = (variables,) if isinstance(variables, str) else tuple(variables)
    cover = rg.covering(vars_)
    if not cover:
        raise ValidationError(f"no region covers {vars_}")
    tables = []
    for r in cover:
        reg = rg.regions[r]
        m = beliefs[r].sum(axis=_sum_axes(reg, vars_))
        kept = [v for v in reg if v in vars_]
        m = np.transpose(m, [kept.index(v) for v in vars_])
        tables.append((len(reg), m))
    best = min(tables, key=lambda x: x[0])[1]
    disc = max(float(np.max(np.abs(m - best))) for _, m in tables)
    return best, disc


def solve_factor_graph(factor_graph: FactorGraph, options: DoubleLoopOptions = DoubleLoopOptions()) -> CVMResult:
    rg = build_region_graph(factor_graph)
    return double_loop_minimize(rg, cluster_log_potentials(rg, factor_graph), options)


def beliefs_to_csv(beliefs: BeliefSet) -> str:
    """One row per (region, configuration): region index, variables, flat index, probability."""
    rows = ["region,variables,index,probability"]
    for r, (reg, p) in enumerate(zip(beliefs.region_graph.regions, beliefs.beliefs)):
        name = " ".join(reg)
        for i, v in enumerate(p.ravel()):
            rows.append(f"{r},{name},{i},{float(v)!r}")
    return "\n".join(rows) + "\n"
