import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from klcontrol import blocks, chain, cvm
from klcontrol.errors import ValidationError
from klcontrol.factored import export_factor_graph
from klcontrol.factorgraph import FactorGraph


def chain_graph(prob, x0=0):
    """Factor graph of a chain with x^0 clamped: unary on x1, pairwise psi afterwards."""
    psi = chain.build_potentials(prob).potentials
    T, N = prob.horizon, prob.num_states
    fg = FactorGraph({f"x{t}": N for t in range(1, T + 1)}, [], -prob.state_cost[0, x0])
    fg.add(["x1"], psi[0, x0])
    for t in range(1, T):
        fg.add([f"x{t}", f"x{t + 1}"], psi[t])
    return fg


def cycle_graph(tables):
    fg = FactorGraph({v: 2 for v in "abcd"}, [])
    for scope, tab in zip([("a", "b"), ("b", "c"), ("c", "d"), ("a", "d")], tables):
        fg.add(scope, tab)
    return fg


def random_graph(rng, num_vars=5, num_factors=6, card=2, max_scope=3):
    names = [f"v{i}" for i in range(num_vars)]
    fg = FactorGraph({v: card for v in names}, [])
    for _ in range(num_factors):
        k = int(rng.integers(1, max_scope + 1))
        scope = list(rng.choice(names, size=k, replace=False))
        fg.add(scope, rng.uniform(0.2, 2.0, size=(card,) * k))
    for v in names:
        if not any(v in f.scope for f in fg.factors):
            fg.add([v], rng.uniform(0.2, 2.0, size=card))
    return fg


def exact_log_z(fg):
    names = fg.variables
    lw = [fg.log_weight(dict(zip(names, a))) for a in itertools.product(*[range(fg.cardinalities[v]) for v in names])]
    m = max(lw)
    return m + np.log(np.sum(np.exp(np.array(lw) - m)))


# -- region graphs -------------------------------------------------------------------


def test_chain_region_graph():
    fg = FactorGraph({"x1": 2, "x2": 2, "x3": 2}, [])
    fg.add(["x1", "x2"], np.ones((2, 2)))
    fg.add(["x2", "x3"], np.ones((2, 2)))
    rg = cvm.build_region_graph(fg)
    assert rg.regions[rg.num_outer:] == (("x2",),)
    assert rg.counting_numbers == (1, 1, -1)


def test_cycle_region_graph():
    rg = cvm.build_region_graph(cycle_graph([np.ones((2, 2))] * 4))
    inner = [rg.regions[b] for b in rg.inner]
    assert sorted(inner) == [("a",), ("b",), ("c",), ("d",)]
    assert all(rg.counting_numbers[b] == -1 for b in rg.inner)


def check_region_graph(rg):
    assert all(r == 0 for r in rg.mobius_residuals())
    assert all(rg.counting_numbers[a] == 1 for a in rg.outer)
    assert all(isinstance(c, int) for c in rg.counting_numbers)
    sets = [frozenset(r) for r in rg.regions]
    for a, b in itertools.combinations(sets, 2):
        if a & b:
            assert a & b in sets


def test_blocks_region_graph_mobius():
    fg = export_factor_graph(blocks.build_model(blocks.BlocksConfig(4, 2, 3, 10.0, (1, 0, 1, 0))))
    check_region_graph(cvm.build_region_graph(fg))


@given(st.integers(0, 2**32 - 1))
def test_random_region_graphs_are_valid(seed):
    check_region_graph(cvm.build_region_graph(random_graph(np.random.default_rng(seed), 6, 7)))


def test_subset_scopes_join_their_cluster():
    fg = FactorGraph({"a": 2, "b": 3}, [])
    fg.add(["a", "b"], np.ones((2, 3)))
    fg.add(["b"], np.array([1.0, 2.0, 3.0]))
    fg.add(["a", "b"], np.full((2, 3), 2.0))
    rg = cvm.build_region_graph(fg)
    assert rg.regions == (("a", "b"),)
    lp = cvm.cluster_log_potentials(rg, fg)[0]
    np.testing.assert_allclose(lp, np.broadcast_to(np.log(2.0) + np.log([1.0, 2.0, 3.0]), (2, 3)))


# -- free energy ---------------------------------------------------------------------


def test_single_cluster_exact(rng):
    fg = FactorGraph({"a": 2, "b": 3}, [])
    tab = rng.uniform(0.1, 2, (2, 3))
    fg.add(["a", "b"], tab)
    rg = cvm.build_region_graph(fg)
    p = tab / tab.sum()
    F = cvm.cvm_free_energy(rg, [p], cvm.cluster_log_potentials(rg, fg))
    assert F == pytest.approx(-np.log(tab.sum()), abs=1e-14)


def test_bethe_is_exact_on_chain(rng):
    prob = chain.random_problem(rng, 3, 5, cost_scale=2.0)
    fg = chain_graph(prob)
    rg = cvm.build_region_graph(fg)
    sol = chain.solve(prob, 0)
    pm, sm = chain.pair_marginals(sol), chain.state_marginals(sol)
    beliefs = []
    for reg in rg.regions:
        if len(reg) == 2:
            t = int(reg[0][1:])
            beliefs.append(pm[t])
        else:
            beliefs.append(sm[int(reg[0][1:])])
    F = cvm.cvm_free_energy(rg, beliefs, cvm.cluster_log_potentials(rg, fg))
    assert F - fg.log_offset == pytest.approx(sol.optimal_cost, abs=1e-10)


def test_uniform_beliefs_on_cycle():
    rg = cvm.build_region_graph(cycle_graph([np.ones((2, 2))] * 4))
    beliefs = [np.full(rg.shape(r), 1.0 / np.prod(rg.shape(r))) for r in range(len(rg.regions))]
    F = cvm.cvm_free_energy(rg, beliefs, [np.zeros(rg.shape(a)) for a in rg.outer])
    expected = -sum(np.log(4) for _ in rg.outer) - sum(rg.counting_numbers[b] * np.log(2) for b in rg.inner)
    assert F == pytest.approx(expected, abs=1e-14)
    assert F == pytest.approx(-4 * np.log(2), abs=1e-14)


def test_free_energy_rejects_negative_beliefs():
    rg = cvm.build_region_graph(cycle_graph([np.ones((2, 2))] * 4))
    beliefs = [np.full(rg.shape(r), 0.25) for r in range(len(rg.regions))]
    beliefs[0] = np.array([[0.5, 0.5], [0.5, -0.5]])
    with pytest.raises(ValidationError):
        cvm.cvm_free_energy(rg, beliefs, [np.zeros((2, 2))] * 4)


# -- allocation and bound ------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_allocation_is_admissible(seed):
    rg = cvm.build_region_graph(random_graph(np.random.default_rng(seed), 6, 8))
    kappa = cvm.convex_allocation(rg)
    for b, k in kappa.items():
        assert 0 <= k <= -rg.counting_numbers[b] + 1e-9
        assert k <= len(rg.outer_parents[b]) - 1 + 1e-9


def test_chain_is_fully_convexified():
    fg = chain_graph(chain.random_problem(np.random.default_rng(3), 3, 6))
    rg = cvm.build_region_graph(fg)
    kappa = cvm.convex_allocation(rg)
    assert all(k == pytest.approx(1.0) for k in kappa.values())


def test_bound_touches_and_dominates(rng):
    fg = cycle_graph([rng.uniform(0.2, 3, (2, 2)) for _ in range(4)])
    rg = cvm.build_region_graph(fg)
    lp = cvm.cluster_log_potentials(rg, fg)
    for _ in range(5):
        x0 = cvm.random_feasible_beliefs(rg, rng)
        F0 = cvm.cvm_free_energy(rg, x0, lp)
        assert cvm.convex_bound(rg, x0, lp, x0) == pytest.approx(F0, abs=1e-12)
        for _ in range(20):
            x = cvm.random_feasible_beliefs(rg, rng)
            assert cvm.convex_bound(rg, x, lp, x0) >= cvm.cvm_free_energy(rg, x, lp) - 1e-12


# -- double loop ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tree_exactness(seed):
    rng = np.random.default_rng(seed)
    prob = chain.random_problem(rng, 4, 6, cost_scale=2.0, sparsity=0.3)
    fg = chain_graph(prob)
    res = cvm.solve_factor_graph(fg)
    assert res.converged
    sol = chain.solve(prob, 0)
    assert res.free_energy - fg.log_offset == pytest.approx(sol.optimal_cost, abs=1e-6)
    marg = chain.state_marginals(sol)
    for t in range(1, 7):
        m, disc = cvm.marginals(res.beliefs, f"x{t}")
        np.testing.assert_allclose(m, marg[t], atol=1e-6)
        assert disc < 1e-6


def test_exact_beliefs_give_chain_marginals(rng):
    prob = chain.random_problem(rng, 3, 4)
    fg = chain_graph(prob)
    res = cvm.solve_factor_graph(fg, cvm.DoubleLoopOptions(outer_tolerance=1e-12))
    marg = chain.state_marginals(chain.solve(prob, 0))
    for t in range(1, 5):
        np.testing.assert_allclose(cvm.marginals(res.beliefs, f"x{t}")[0], marg[t], atol=1e-10)


def test_uniform_potentials_give_uniform_marginals():
    res = cvm.solve_factor_graph(cycle_graph([np.ones((2, 2))] * 4))
    for v in "abcd":
        np.testing.assert_allclose(cvm.marginals(res.beliefs, v)[0], [0.5, 0.5], atol=1e-12)


def test_uncovered_variable():
    res = cvm.solve_factor_graph(cycle_graph([np.ones((2, 2))] * 4))
    with pytest.raises(ValidationError):
        cvm.marginals(res.beliefs, "z")


def test_pair_marginal_from_cluster(rng):
    fg = cycle_graph([rng.uniform(0.2, 3, (2, 2)) for _ in range(4)])
    res = cvm.solve_factor_graph(fg)
    m, _ = cvm.marginals(res.beliefs, ("b", "a"))
    np.testing.assert_allclose(m.T, res.beliefs[0], atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_trace_monotone_and_descent_chain(seed):
    rng = np.random.default_rng(seed)
    fg = random_graph(rng, 5, 6, card=int(rng.integers(2, 4)))
    rg = cvm.build_region_graph(fg)
    res = cvm.double_loop_minimize(rg, cvm.cluster_log_potentials(rg, fg))
    trace = np.array(res.trace)
    assert np.all(np.diff(trace) <= 1e-12)
    for start, end, new in res.descent_chain:
        assert start >= end - 1e-9
        assert end >= new - 1e-9
    assert res.status in ("converged", "non-converged")
    for b in res.beliefs.beliefs:
        assert np.all(b >= 0)
        assert b.sum() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_cvm_close_to_exact_on_loopy_graph(seed):
    rng = np.random.default_rng(seed)
    fg = random_graph(rng, 5, 5, card=2, max_scope=2)
    res = cvm.solve_factor_graph(fg)
    assert res.converged
    # weakly coupled small graphs: the free energy approximates -log Z closely
    assert abs(res.free_energy + exact_log_z(fg)) < 0.5


def test_bound_spot_check_mode(rng):
    fg = cycle_graph([rng.uniform(0.2, 3, (2, 2)) for _ in range(4)])
    res = cvm.solve_factor_graph(fg, cvm.DoubleLoopOptions(check_bound=True))
    assert res.converged


def test_non_convergence_is_flagged(rng):
    fg = export_factor_graph(blocks.build_model(blocks.BlocksConfig(4, 2, 4, 10.0, (1, 0, 1, 0))))
    res = cvm.solve_factor_graph(fg, cvm.DoubleLoopOptions(max_outer=1, inner_iterations=2, retry_rounds=0))
    assert not res.converged
    assert res.status == "non-converged"
    assert res.diagnostic
    assert np.isfinite(res.max_violation)


def test_options_validation():
    with pytest.raises(ValidationError):
        cvm.DoubleLoopOptions(outer_tolerance=0)
    with pytest.raises(ValidationError):
        cvm.DoubleLoopOptions(damping=1.0)


def test_damping_still_converges(rng):
    prob = chain.random_problem(rng, 3, 4)
    fg = chain_graph(prob)
    res = cvm.solve_factor_graph(fg, cvm.DoubleLoopOptions(damping=0.5))
    assert res.converged
    assert res.free_energy - fg.log_offset == pytest.approx(chain.solve(prob, 0).optimal_cost, abs=1e-6)


def test_beliefs_csv(rng):
    res = cvm.solve_factor_graph(cycle_graph([np.ones((2, 2))] * 4))
    lines = cvm.beliefs_to_csv(res.beliefs).strip().splitlines()
    assert lines[0] == "region,variables,index,probability"
    assert len(lines) == 1 + 4 * 4 + 4 * 2
