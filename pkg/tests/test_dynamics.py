import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import generator_lists, two_gen
from fxted.dynamics import (Gains, NoiseModel, default_lambda0, disturbance_bound, integrate, lyapunov_V, rhs,
                            settling_bounds, sgn_mu, simulate, stable_smoothing_eps, step, step_index)
from fxted.errors import ValidationError
from fxted.graphnet import (Topology, TopologySchedule, complete_graph, path_graph, random_connected_topology,
                            random_schedule)
from fxted.model import Assignment, GeneratorParams, LoadSchedule, SystemState
from fxted.oracle import unconstrained_optimum
from fxted.scenarios import Scenario, random_scenario


def two_bus(t_end=20.0, **kw):
    return Scenario(name="two", generators=two_gen(), topology_schedule=TopologySchedule.static(path_graph(2)),
                    gains=Gains(**kw), loads=LoadSchedule((1.0, 1.0)), assignment=Assignment((0, 1), 2),
                    t_end=t_end)


# --- sgn_mu ----------------------------------------------------------------------

def test_sgn_mu_examples():
    assert sgn_mu(4, 0.5) == 2
    assert sgn_mu(-3, 2) == -9
    assert sgn_mu(0, 0.3) == 0
    assert sgn_mu(0, 1.7) == 0


@given(st.floats(-1e6, 1e6), st.floats(0.05, 3))
def test_sgn_mu_is_odd(x, mu):
    assert sgn_mu(-x, mu) == -sgn_mu(x, mu)


# --- gains and noise ----------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(p=0), dict(mu1=1.0), dict(mu2=1.0), dict(nu1=0.0), dict(nu2=0.9),
                                dict(dt=0), dict(smoothing_eps=-1)])
def test_gain_validation(kw):
    with pytest.raises(ValidationError):
        Gains(**kw)


@pytest.mark.parametrize("noise", [NoiseModel("uniform", bound=0.3, seed=1),
                                   NoiseModel("truncated_gaussian", sigma=0.1, seed=2)])
def test_noise_samples_bounded_and_centred(noise):
    x = noise.sample(noise.rng(), (200_000,))
    assert np.abs(x).max() <= noise.clip
    assert abs(x.mean()) <= 4 * x.std() / math.sqrt(x.size)


def test_noise_from_variance():
    assert NoiseModel.from_dict({"kind": "truncated_gaussian", "variance": 0.01}).sigma == pytest.approx(0.1)
    assert NoiseModel.from_dict(None).kind == "none"
    with pytest.raises(ValidationError):
        NoiseModel("pink")


def test_disturbance_bound_zero_without_noise():
    assert disturbance_bound(NoiseModel(), two_gen()) == 0.0
    # equal alphas: Gamma/(2 alpha_min) = 1/N
    assert disturbance_bound(NoiseModel("uniform", bound=0.3), two_gen()) == pytest.approx(0.3 * 1.5)


# --- rhs ------------------------------------------------------------------------------

def test_rhs_zero_at_equilibrium():
    gens = two_gen(alpha=(1, 0.5), beta=(1, 2))
    lam = np.array([3.0, 3.0])
    P = (lam - np.array([1, 2])) / np.array([2, 1])
    dP, dlam = rhs(SystemState(P, lam), path_graph(2), gens, Gains())
    np.testing.assert_array_equal(dP, 0)
    np.testing.assert_array_equal(dlam, 0)


def test_rhs_hand_example():
    gens = two_gen()
    lam = np.array([0.0, 1.0])
    P = lam.copy()  # alpha = 1/2, beta = 0: consistent when P = lam
    dP, dlam = rhs(SystemState(P, lam), path_graph(2), gens, Gains(p=1, mu1=0.5, mu2=2))
    np.testing.assert_allclose(dP, [3, -3])
    np.testing.assert_allclose(dlam, dP)


@given(generator_lists(min_n=2, max_n=7), st.integers(0, 10_000), st.floats(0, 2))
def test_rhs_conserves_power_exactly(gens, seed, eps):
    rng = np.random.default_rng(seed)
    n = len(gens)
    topo = random_connected_topology(n, rng)
    state = SystemState(rng.uniform(-50, 50, n), rng.uniform(-100, 100, n))
    dP, _ = rhs(state, topo, gens, Gains(p=rng.uniform(0.1, 10), smoothing_eps=eps))
    assert abs(dP.sum()) <= 1e-12 * max(1.0, np.abs(dP).max())


@given(generator_lists(min_n=2, max_n=6), st.integers(0, 10_000))
def test_rhs_vanishes_only_at_consensus_and_consistency(gens, seed):
    rng = np.random.default_rng(seed)
    n = len(gens)
    topo = random_connected_topology(n, rng)
    alpha = np.array([g.alpha for g in gens])
    beta = np.array([g.beta for g in gens])
    lam = np.full(n, rng.uniform(0, 20))
    P = (lam - beta) / (2 * alpha)
    dP, dlam = rhs(SystemState(P, lam), topo, gens, Gains())
    assert np.all(dP == 0) and np.allclose(dlam, 0, atol=1e-12)
    # break consensus or consistency: some derivative becomes nonzero
    lam2 = lam.copy()
    lam2[int(rng.integers(n))] += 1.0
    assert np.abs(np.concatenate(rhs(SystemState(P, lam2), topo, gens, Gains()))).max() > 0
    P2 = P.copy()
    P2[0] += 1.0
    assert np.abs(rhs(SystemState(P2, lam), topo, gens, Gains())[1]).max() > 0


# --- step ---------------------------------------------------------------------------------

def test_step_at_equilibrium_only_advances_time():
    gens = two_gen()
    s = SystemState([2.0, 2.0], [2.0, 2.0], 0.0)
    out = step(s, TopologySchedule.static(path_graph(2)), gens, Gains(dt=0.01))
    np.testing.assert_array_equal(out.P, s.P)
    np.testing.assert_array_equal(out.lam, s.lam)
    assert out.t == pytest.approx(0.01)


def test_step_hand_example():
    gens = two_gen()
    s = SystemState([0.0, 1.0], [0.0, 1.0])
    out = step(s, TopologySchedule.static(path_graph(2)), gens, Gains(p=1, mu1=0.5, mu2=2, dt=0.01))
    np.testing.assert_allclose(out.P, [0.03, 0.97])


@given(generator_lists(min_n=2, max_n=6), st.integers(0, 10_000))
def test_step_conserves_total_power(gens, seed):
    rng = np.random.default_rng(seed)
    n = len(gens)
    sched = TopologySchedule.static(random_connected_topology(n, rng))
    P = rng.uniform(0, 50, n)
    s = SystemState(P, rng.uniform(-100, 100, n))
    for _ in range(20):
        s = step(s, sched, gens, Gains(dt=1e-3))
    assert abs(s.P.sum() - P.sum()) <= 1e-9 * P.sum()


def test_step_index_snaps_forward():
    assert step_index(0.0025, 1e-4) == 25
    assert step_index(0.00251, 1e-4) == 26
    assert step_index(1.0, 1e-6) == 1_000_000


def test_step_applies_load_event_to_assigned_generator():
    gens = two_gen()
    loads = LoadSchedule((1.0, 1.0), ((0.01, (1.0, 4.0)),))
    s = SystemState([1.0, 1.0], [1.0, 1.0], 0.0)
    out = step(s, TopologySchedule.static(path_graph(2)), gens, Gains(dt=0.01), loads=loads,
               assignment=Assignment((1, 0), 2))
    np.testing.assert_allclose(out.P, [4.0, 1.0])


# --- numba kernel vs numpy reference ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_kernel_matches_reference_stepper(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    gens = [GeneratorParams(rng.uniform(0.1, 2), rng.uniform(0, 10)) for _ in range(n)]
    dt = 1e-3
    sched = random_schedule(n, rng, 3, 0.0105)
    gains = Gains(p=rng.uniform(0.5, 3), dt=dt, smoothing_eps=float(rng.choice([0.0, 0.05])))
    demands = tuple(rng.uniform(1, 10, n))
    new = tuple(d * 1.5 for d in demands)
    loads = LoadSchedule(demands, ((0.0153, new),))
    assign = Assignment.default(n, n)
    noise = NoiseModel("uniform", bound=0.2, seed=seed)
    P0 = np.array(demands)
    lam0 = rng.uniform(-20, 20, n)
    steps = 40
    tr = integrate(gens, sched, gains, P0, lam0, steps * dt, loads=loads, assignment=assign, noise=noise,
                   sample_stride=1)
    s = SystemState(P0, lam0, 0.0)
    r = noise.rng()
    for _ in range(steps):
        s = step(s, sched, gens, gains, noise=noise, rng=r, loads=loads, assignment=assign)
    np.testing.assert_allclose(tr.P[-1], s.P, rtol=1e-12, atol=1e-11)
    np.testing.assert_allclose(tr.lam[-1], s.lam, rtol=1e-12, atol=1e-11)
    assert tr.t[-1] == pytest.approx(s.t)


# --- simulate -------------------------------------------------------------------------------

def test_two_bus_converges_to_oracle():
    sc = two_bus()
    tr = simulate(sc)
    lam_star = unconstrained_optimum(sc.generators, 2.0).lambda_star
    assert np.abs(tr.lam[-1] - lam_star).max() <= 1e-3
    assert tr.first_convergence_time is not None


def test_single_generator_tracks_its_marginal_cost():
    g = [GeneratorParams(0.7, 3.0)]
    sc = Scenario(name="one", generators=g, topology_schedule=TopologySchedule.static(Topology(np.zeros((1, 1)))),
                  gains=Gains(), loads=LoadSchedule((5.0,)), assignment=Assignment((0,), 1), lambda0=(0.0,),
                  t_end=15.0)
    tr = simulate(sc)
    assert tr.lam[-1, 0] == pytest.approx(2 * 0.7 * 5.0 + 3.0, abs=1e-3)
    assert np.all(tr.consensus_err == 0)


@pytest.mark.parametrize("seed", range(5))
def test_noise_free_balance_holds_at_every_sample(seed):
    sc = random_scenario(int(np.random.default_rng(seed).integers(2, 8)), seed)
    tr = simulate(sc, sample_stride=10)
    P_tot = sc.demand()
    assert tr.balance_residual.max() <= 1e-6 * P_tot


def test_balance_with_noise_is_unbiased():
    sc = random_scenario(4, 11, noise_bound=0.3)
    finals = []
    for seed in range(100):
        tr = simulate(sc, noise=replace(sc.noise, seed=seed), t_end=0.5, sample_stride=5000)
        finals.append(tr.P[-1].sum() - tr.P_tot[-1])
    finals = np.array(finals)
    assert abs(finals.mean()) <= 3 * finals.std(ddof=1) / math.sqrt(finals.size)


def test_simulate_is_deterministic():
    sc = random_scenario(5, 3, noise_bound=0.3)
    a = simulate(sc, t_end=1.0)
    b = simulate(sc, t_end=1.0)
    assert a.rows().tobytes() == b.rows().tobytes()


def test_trace_columns_contract():
    tr = simulate(two_bus(t_end=0.01))
    assert tr.columns() == ["t", "lambda_0", "lambda_1", "P_0", "P_1", "consensus_err", "balance_residual", "V"]
    assert tr.rows().shape[1] == len(tr.columns())


def test_load_event_rebalances_power():
    gens = two_gen()
    loads = LoadSchedule((1.0, 1.0), ((0.5, (2.0, 3.0)),))
    sc = Scenario(name="ev", generators=gens, topology_schedule=TopologySchedule.static(path_graph(2)),
                  gains=Gains(), loads=loads, assignment=Assignment((0, 1), 2), t_end=20.0)
    tr = simulate(sc)
    assert tr.event_times == pytest.approx([0.5])
    assert tr.balance_residual.max() <= 1e-9 * 5
    assert np.abs(tr.lam[-1] - 2.5).max() <= 1e-3


# --- bounds ---------------------------------------------------------------------------------

def test_T1_for_seven_generators():
    gens = [GeneratorParams(1, 1)] * 7
    b = settling_bounds(gens, TopologySchedule.static(complete_graph(7)), Gains())
    expected = 2 / (2 ** 0.9 * 0.2) + 2 * 7 ** 0.1 / (2 ** 1.1 * 0.2)
    assert b.T1 == pytest.approx(expected, rel=1e-12)
    assert b.T1 == pytest.approx(11.026175221, rel=1e-9)


def test_no_disturbance_needs_no_gain():
    b = settling_bounds(two_gen(), TopologySchedule.static(path_graph(2)), Gains(), Delta=0.0)
    assert b.p_min_gain == 0.0


@given(generator_lists(min_n=2, max_n=8), st.floats(0.1, 100), st.integers(0, 1000))
def test_doubling_p_halves_T2(gens, p, seed):
    sched = TopologySchedule.static(random_connected_topology(len(gens), np.random.default_rng(seed)))
    a = settling_bounds(gens, sched, Gains(p=p))
    b = settling_bounds(gens, sched, Gains(p=2 * p))
    assert b.T2 == pytest.approx(a.T2 / 2, rel=1e-12)
    assert a.T1 == b.T1
    assert all(math.isfinite(v) and v > 0 for v in (a.T1, a.T2, a.c1, a.c2))


def test_switching_bound_uses_worst_phase():
    gens = [GeneratorParams(1, 1)] * 3
    k3 = settling_bounds(gens, TopologySchedule.static(complete_graph(3)), Gains())
    both = settling_bounds(gens, TopologySchedule((complete_graph(3), path_graph(3)), ((0.0, 0), (1.0, 1))), Gains())
    path = settling_bounds(gens, TopologySchedule.static(path_graph(3)), Gains())
    assert both.T2 == pytest.approx(path.T2)
    assert both.T2 > k3.T2


# --- Lyapunov function ---------------------------------------------------------------------------

def test_lyapunov_examples():
    gens = two_gen()
    assert lyapunov_V(SystemState([0, 0], [3.0, 3.0]), gens) == 0.0
    assert lyapunov_V(SystemState([0, 0], [0.0, 2.0]), gens) == pytest.approx(1.0)


@given(generator_lists(min_n=2, max_n=6), st.floats(-50, 50), st.integers(0, 1000))
def test_lyapunov_shift_invariant(gens, shift, seed):
    lam = np.random.default_rng(seed).uniform(-10, 10, len(gens))
    P = np.zeros(len(gens))
    a = lyapunov_V(SystemState(P, lam), gens)
    b = lyapunov_V(SystemState(P, lam + shift), gens)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_lyapunov_non_increasing_after_T1(seed):
    sc = random_scenario(int(np.random.default_rng(seed).integers(2, 8)), seed)
    eps = stable_smoothing_eps(sc.generators, sc.topology_schedule, sc.gains)
    b = settling_bounds(sc.generators, sc.topology_schedule, sc.gains)
    tr = simulate(sc, gains=replace(sc.gains, smoothing_eps=eps), t_end=b.total, sample_stride=10)
    V = tr.V[tr.t >= b.T1]
    assert np.all(np.diff(V) <= 1e-9)


def test_default_lambda0_is_consistent():
    gens = two_gen(alpha=(1, 0.5), beta=(2, 3))
    P0 = np.array([4.0, 1.0])
    lam0 = default_lambda0(gens, P0)
    np.testing.assert_allclose(lam0, [10.0, 4.0])


@pytest.mark.parametrize("seed", range(8))
def test_bare_sign_chatters_within_euler_amplitude(seed):
    # without a boundary layer the sign term overshoots by dt*p*2alpha per
    # neighbour each step; the terminal spread stays inside that band, and the
    # stable layer removes it
    n = int(np.random.default_rng(seed).integers(2, 7))
    sc = random_scenario(n, seed)
    bare = replace(sc.gains, smoothing_eps=0.0)
    tr = simulate(sc, gains=bare, t_end=sc.t_end, sample_stride=1000)
    alpha = max(g.alpha for g in sc.generators)
    deg = sc.topology_schedule.topologies[0].adjacency.sum(axis=1).max()
    assert tr.consensus_err[-1] <= 2 * bare.dt * bare.p * 2 * alpha * deg
    layered = replace(sc.gains, smoothing_eps=stable_smoothing_eps(sc.generators, sc.topology_schedule, sc.gains))
    assert simulate(sc, gains=layered, t_end=sc.t_end, sample_stride=1000).consensus_err[-1] <= 1e-9
