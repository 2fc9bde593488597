import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from klcontrol import blocks, chain
from klcontrol.errors import BudgetExceededError, ValidationError
from klcontrol.factored import (
    Auxiliary,
    ComponentSpec,
    CostFactor,
    assemble,
    auxiliary_marginals,
    export_factor_graph,
    flatten,
    variable_name,
)
from klcontrol.factorgraph import FactorGraph


def random_kernel(rng, c):
    k = rng.random((c, c))
    return k / k.sum(axis=1, keepdims=True)


def two_components(rng, T=3, x0=(0, 1), factors=()):
    comps = [ComponentSpec("a", 2, random_kernel(rng, 2)), ComponentSpec("b", 3, random_kernel(rng, 3))]
    return assemble(comps, [], list(factors), T, x0)


def test_independent_components_flatten_to_tensor_product(rng):
    ka, kb = random_kernel(rng, 2), random_kernel(rng, 2)
    prob = assemble([ComponentSpec("a", 2, ka), ComponentSpec("b", 2, kb)], [], [], 2)
    flat = flatten(prob)
    np.testing.assert_allclose(flat.chain.kernel[0], np.kron(ka, kb), atol=1e-15)
    assert chain.optimal_start_cost(flat.chain, 0) == pytest.approx(0.0, abs=1e-14)


def test_undeclared_scope_rejected(rng):
    comps = [ComponentSpec("a", 2, random_kernel(rng, 2))]
    with pytest.raises(ValidationError, match="undeclared"):
        assemble(comps, [], [CostFactor(("z",), np.zeros(2))], 2)


def test_bad_cost_shape_rejected(rng):
    comps = [ComponentSpec("a", 2, random_kernel(rng, 2))]
    with pytest.raises(ValidationError):
        assemble(comps, [], [CostFactor(("a",), np.zeros(3))], 2)


def test_non_normalised_mixture_rejected():
    aux = [Auxiliary("s", 2, [0.5, 0.5])]
    mix = np.zeros((2, 2, 2))
    mix[:, 0, 0] = 1.0  # selector value 1 has no mass
    comps = [ComponentSpec("a", 2, selectors=("s",), mixture=mix)]
    with pytest.raises(ValidationError, match="normalis"):
        flatten(assemble(comps, aux, [], 2, (0,)))


def test_component_needs_kernel_or_mixture():
    with pytest.raises(ValidationError):
        assemble([ComponentSpec("a", 2)], [], [], 2)


def test_blocks_n2_m1_flattens_to_two_states():
    cfg = blocks.BlocksConfig(2, 1, 3, 1.0, (1, 0))
    flat = flatten(blocks.build_model(cfg))
    assert sorted(map(tuple, flat.states.tolist())) == [(0, 1), (1, 0)]
    K = flat.chain.kernel[0]
    # l = 0 keeps the state (1/3); from (1,0) only k=1, l=+-1 move (1/3); k=2 is forbidden (1/3)
    np.testing.assert_allclose(flat.surviving_mass[0], [2 / 3, 2 / 3])
    assert np.all(np.diag(K) >= 1 / 3)
    np.testing.assert_allclose(K, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def weak_compositions(m, n):
    return sum(1 for c in itertools.product(range(m + 1), repeat=n) if sum(c) == m)


@pytest.mark.parametrize("n,m", [(4, 2), (3, 3), (4, 4)])
def test_blocks_state_count(n, m):
    x0 = [0] * n
    x0[0] = m
    flat = flatten(blocks.build_model(blocks.BlocksConfig(n, m, 2, 1.0, x0)))
    assert len(flat.states) == weak_compositions(m, n)
    assert np.all(flat.states.sum(axis=1) == m)


def test_flatten_budget(rng):
    comps = [ComponentSpec(f"c{i}", 10, random_kernel(rng, 10)) for i in range(4)]
    with pytest.raises(BudgetExceededError):
        flatten(assemble(comps, [], [], 2), budget=9999)


def test_index_map_round_trip(rng):
    flat = flatten(two_components(rng, x0=None))
    for i in range(len(flat.states)):
        assert flat.index(flat.assignment(i)) == i
    assert len(flat.index_map) == len(flat.states) == 6


def test_mixed_radix_order(rng):
    flat = flatten(two_components(rng, x0=None))
    assert [flat.assignment(i) for i in range(6)] == [(a, b) for a in range(2) for b in range(3)]


@given(st.integers(0, 2**32 - 1))
def test_blocks_mixture_rows_stochastic(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    x0 = tuple(rng.multinomial(m, np.ones(n) / n))
    flat = flatten(blocks.build_model(blocks.BlocksConfig(n, m, 2, 1.0, x0)))
    np.testing.assert_allclose(flat.chain.kernel.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(flat.states >= 0) and np.all(flat.states <= m)


def test_flat_cost_is_sum_of_factors(rng):
    fa = CostFactor(("a",), rng.random(2))
    fab = CostFactor(("a", "b"), rng.random((4, 2, 3)))
    prob = two_components(rng, factors=[fa, fab])
    flat = flatten(prob)
    for i, (a, b) in enumerate(flat.states):
        for t in range(4):
            assert flat.chain.state_cost[t, i] == pytest.approx(fa.table[a] + fab.table[t, a, b])


def test_ordering_invariance(rng):
    ka, kb = random_kernel(rng, 2), random_kernel(rng, 3)
    cost = rng.random((2, 3))
    p1 = assemble([ComponentSpec("a", 2, ka), ComponentSpec("b", 3, kb)], [],
                  [CostFactor(("a", "b"), cost)], 4, (1, 2))
    p2 = assemble([ComponentSpec("b", 3, kb), ComponentSpec("a", 2, ka)], [],
                  [CostFactor(("a", "b"), cost)], 4, (2, 1))
    f1, f2 = flatten(p1), flatten(p2)
    c1 = chain.optimal_start_cost(f1.chain, f1.index((1, 2)))
    c2 = chain.optimal_start_cost(f2.chain, f2.index((2, 1)))
    assert c1 == pytest.approx(c2, abs=1e-12)


def brute_force_marginals(prob):
    """Exact per-slice component marginals by summing over all joint paths."""
    flat = flatten(prob)
    sol = chain.solve(flat.chain, flat.index(prob.initial_state))
    return flat.component_marginals(chain.state_marginals(sol))


def test_flat_marginals_match_factor_graph_enumeration(rng):
    fab = CostFactor(("a", "b"), rng.random((2, 3)) * 2)
    prob = two_components(rng, T=3, factors=[fab])
    fg = export_factor_graph(prob)
    names = fg.variables
    weights = {}
    for assign in itertools.product(*[range(fg.cardinalities[v]) for v in names]):
        weights[assign] = np.exp(fg.log_weight(dict(zip(names, assign))))
    Z = sum(weights.values())
    marg = brute_force_marginals(prob)
    for t in range(1, 4):
        for ci, comp in enumerate(("a", "b")):
            j = names.index(variable_name(comp, t))
            m = np.zeros(fg.cardinalities[names[j]])
            for assign, w in weights.items():
                m[assign[j]] += w / Z
            np.testing.assert_allclose(m, marg[ci][t], atol=1e-12)
    cost = chain.optimal_start_cost(flatten(prob).chain, flatten(prob).index(prob.initial_state))
    assert -np.log(Z) == pytest.approx(cost, abs=1e-12)


def test_export_single_component_chain(rng):
    prob = assemble([ComponentSpec("x", 3, random_kernel(rng, 3))], [], [CostFactor(("x",), rng.random(3))], 2, (0,))
    fg = export_factor_graph(prob)
    scopes = sorted(f.scope for f in fg.factors)
    assert scopes == [("x@1",), ("x@1",), ("x@1", "x@2"), ("x@2",)]


def test_export_blocks_factor_structure():
    cfg = blocks.BlocksConfig(4, 2, 10, 10.0, (1, 0, 1, 0))
    fg = export_factor_graph(blocks.build_model(cfg))
    scopes = [f.scope for f in fg.factors if f.scope[-1].endswith("@3")]
    assert ("k@3",) in scopes and ("l@3",) in scopes
    for i in range(1, 5):
        assert ("k@3", "l@3", f"s{i}@3") in scopes
        assert (f"x{i}@2", f"s{i}@3", f"x{i}@3") in scopes
        assert (f"x{i}@3",) in scopes  # per-location entropy term
    assert len(fg.factors) == 10 * (2 + 3 * 4)


def test_export_path_weights_equal_psi(rng):
    """Product of the exported potentials equals the flat psi along every path."""
    prob = two_components(rng, T=2, factors=[CostFactor(("a", "b"), rng.random((2, 3)))])
    flat = flatten(prob)
    pots = chain.build_potentials(flat.chain).potentials
    fg = export_factor_graph(prob)
    start = flat.index(prob.initial_state)
    for path in itertools.product(range(len(flat.states)), repeat=2):
        a1, b1 = flat.assignment(path[0])
        a2, b2 = flat.assignment(path[1])
        lw = fg.log_weight({"a@1": a1, "b@1": b1, "a@2": a2, "b@2": b2}) - fg.log_offset
        psi = pots[0, start, path[0]] * pots[1, path[0], path[1]]
        assert np.exp(lw) == pytest.approx(psi, rel=1e-10, abs=1e-300)


def test_marginalising_selectors_reproduces_flat_kernel():
    cfg = blocks.BlocksConfig(3, 2, 2, 1.0, (2, 0, 0))
    prob = blocks.build_model(cfg)
    flat = flatten(prob)
    fg = export_factor_graph(prob)
    aux = ["k@2", "l@2", "s1@2", "s2@2", "s3@2"]
    # slice-2 dynamics: selector tables and transitions, but not the unary cost terms
    dynamics = [f for f in fg.factors if f.scope[-1].endswith("@2") and not (
        len(f.scope) == 1 and f.scope[0].startswith("x"))]
    for i, x in enumerate(flat.states):
        for j, y in enumerate(flat.states):
            total = 0.0
            for vals in itertools.product(*[range(fg.cardinalities[v]) for v in aux]):
                assign = dict(zip(aux, vals))
                assign.update({f"x{c + 1}@1": int(x[c]) for c in range(3)})
                assign.update({f"x{c + 1}@2": int(y[c]) for c in range(3)})
                w = 1.0
                for f in dynamics:
                    w *= f.table[tuple(assign[v] for v in f.scope)]
                total += w
            expected = flat.chain.kernel[1, i, j] * flat.surviving_mass[1, i]
            assert total == pytest.approx(expected, abs=1e-12)


def test_auxiliary_posterior_sums_to_one():
    cfg = blocks.BlocksConfig(4, 2, 4, 10.0, (1, 0, 1, 0))
    flat = flatten(blocks.build_model(cfg))
    sol = chain.solve(flat.chain, flat.index(cfg.initial_state))
    kl = auxiliary_marginals(flat, chain.pair_marginals(sol), ("k", "l"))
    assert kl.shape == (4, 4, 3)
    np.testing.assert_allclose(kl.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_factor_graph_json_round_trip(rng):
    fg = export_factor_graph(two_components(rng, T=2, factors=[CostFactor(("a",), rng.random(2))]))
    back = FactorGraph.from_json(fg.to_json())
    assert back.cardinalities == fg.cardinalities
    assert back.log_offset == fg.log_offset
    for f, g in zip(fg.factors, back.factors):
        assert f.scope == g.scope
        np.testing.assert_array_equal(f.table, g.table)
    doc = json.loads(fg.to_json())
    assert doc["format"] == "klcontrol-factor-graph/1"


def test_factor_graph_json_rejects_bad_sizes():
    text = json.dumps({"format": "klcontrol-factor-graph/1", "variables": [{"name": "a", "cardinality": 2}],
                       "factors": [{"scope": ["a"], "table": [1, 2, 3]}]})
    with pytest.raises(ValidationError):
        FactorGraph.from_json(text)
