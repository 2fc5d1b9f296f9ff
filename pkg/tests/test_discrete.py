import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import two_gen
from fxted.discrete import DiscreteState, FacaPlan, discrete_solve, discrete_update, faca_consensus, iterate, z_step
from fxted.dynamics import Gains
from fxted.errors import DisconnectedTopology, MaxIterations
from fxted.graphnet import Topology, TopologySchedule, complete_graph, path_graph, random_connected_topology, ring_graph
from fxted.model import Assignment, LoadSchedule
from fxted.oracle import constrained_optimum
from fxted.scenarios import Scenario, random_scenario, scenario_comparison_30


def static_discrete(sc: Scenario, **kw) -> Scenario:
    return Scenario(**{**sc.__dict__, "mode": "discrete", **kw})


def test_z_step_examples():
    assert z_step(10.0, 1.0) == pytest.approx(10 / 11)
    assert z_step(0.0, 0.1) == 0.0
    assert z_step(-4.0, 0.5) == pytest.approx(-4 / 3)
    with pytest.raises(ValueError):
        z_step(1.0, 0.0)


@given(st.floats(-1e6, 1e6), st.floats(1e-3, 10))
def test_z_step_shrinks_and_keeps_sign(z, h):
    out = z_step(z, h)
    assert abs(out) <= abs(z)
    assert out * z >= 0
    assert abs(out) < 1 / h + 1e-12


def test_faca_examples():
    plan = FacaPlan.from_topology(complete_graph(3))
    assert plan.K == 1
    np.testing.assert_allclose(faca_consensus([1, 2, 3], plan), 2, atol=1e-12)
    plan = FacaPlan.from_topology(path_graph(3))
    assert plan.K == 2
    np.testing.assert_allclose(faca_consensus([1, 0, 0], plan), 1 / 3, atol=1e-12)


def test_faca_rejects_disconnected():
    with pytest.raises(DisconnectedTopology):
        FacaPlan.from_topology(Topology(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])))


@given(st.integers(2, 9), st.integers(0, 10_000))
def test_faca_exact_after_one_cycle(n, seed):
    rng = np.random.default_rng(seed)
    plan = FacaPlan.from_topology(random_connected_topology(n, rng))
    x = rng.uniform(-100, 100, n)
    assert np.max(np.abs(faca_consensus(x, plan) - x.mean())) <= 1e-9 * max(1.0, np.abs(x).max())


@pytest.mark.parametrize("seed", range(10))
def test_update_conserves_total_power(seed):
    sc = random_scenario(5, seed)
    topo = sc.topology_schedule.topologies[0]
    plan = FacaPlan.from_topology(topo)
    state = DiscreteState(np.array(sc.lambda0), sc.initial_P(), 0, 0.1)
    scale = 1.0
    for _ in range(20):
        scale = max(scale, np.abs(state.lam).max() / plan.eigenvalues.min(), np.abs(state.P).max())
        state = discrete_update(state, plan, sc.generators)
        # exact in exact arithmetic; rounding grows with the size of the iterates
        assert abs(state.P.sum() - sc.demand()) <= 1e-12 * sc.n * scale * (state.k + 1)


def test_optimum_is_a_fixed_point():
    sc = random_scenario(4, 3)
    plan = FacaPlan.from_topology(sc.topology_schedule.topologies[0])
    from fxted.oracle import unconstrained_optimum
    opt = unconstrained_optimum(sc.generators, sc.demand())
    state = DiscreteState(np.full(4, opt.lambda_star), opt.P_star, 0, 0.1)
    nxt = discrete_update(state, plan, sc.generators)
    np.testing.assert_allclose(nxt.lam, state.lam, atol=1e-10)
    np.testing.assert_allclose(nxt.P, state.P, atol=1e-12)


def test_consistent_start_needs_no_iterations():
    gens = two_gen()
    plan = FacaPlan.from_topology(path_graph(2))
    state, trace = iterate(gens, plan, [1.0, 1.0], [1.0, 1.0], h=0.1)
    assert state.k == 0 and len(trace.k) == 1


def test_two_gen_converges_to_oracle():
    sc = Scenario(name="two", generators=two_gen(alpha=(1, 0.5)), topology_schedule=TopologySchedule.static(path_graph(2)),
                  gains=Gains(), loads=LoadSchedule((1.0, 2.0)), assignment=Assignment((0, 1), 2), mode="discrete")
    res = discrete_solve(sc)
    assert res.solution.lambda_star == pytest.approx(2.0, abs=1e-3)
    assert res.max_deviation <= 1e-3


def test_comparison_case_within_budget():
    res = discrete_solve(scenario_comparison_30())
    assert res.iterations <= 40
    assert res.max_deviation <= 1e-3 * 250


def test_laplacian_weighting_still_converges():
    res = discrete_solve(scenario_comparison_30(), weighting="laplacian", max_iters=5000)
    assert res.max_deviation <= 1e-3 * 250
    assert res.iterations > discrete_solve(scenario_comparison_30()).iterations


def test_max_iterations_raises():
    with pytest.raises(MaxIterations):
        discrete_solve(scenario_comparison_30(), weighting="laplacian", max_iters=3)


def test_unknown_weighting():
    with pytest.raises(ValueError):
        discrete_solve(scenario_comparison_30(), weighting="nope")


@pytest.mark.parametrize("seed", range(8))
def test_constrained_discrete_matches_oracle(seed):
    sc = random_scenario(5, 300 + seed, constrained=True)
    sc = static_discrete(sc)
    res = discrete_solve(sc, constrained=True)
    oracle = constrained_optimum(sc.generators, sc.demand())
    # |z| only decays like 1/(k h), so the stage answer is good to about tol * P_tot
    np.testing.assert_allclose(res.solution.P_star, oracle.P_star, atol=1e-3 * sc.demand())
    assert len(res.rounds) <= sc.n
