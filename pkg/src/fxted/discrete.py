"""Discrete-time dispatch iteration and finite-step average consensus.

The power update moves along ``-c_k L lam``, so the total is conserved
exactly; the incremental-cost update carries the semi-implicit Euler
recursion ``z <- z / (1 + h|z|)`` on the consistency error.  The step gains
``c_k`` cycle through reciprocals of distinct nonzero eigenvalues, which
annihilates the disagreement modes after one full cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fxted.errors import DisconnectedTopology, MaxIterations, ValidationError
from fxted.graphnet import (Topology, TopologySchedule, distinct_values, is_connected, jacobi_eigh, laplacian,
                            spectrum)
from fxted.model import GeneratorParams, coefficients, total_demand
from fxted.oracle import DispatchSolution, unconstrained_optimum


def z_step(z, h: float):
    if not h > 0:
        raise ValueError("h must be > 0")
    return z / (1.0 + h * np.abs(z))


@dataclass(frozen=True)
class FacaPlan:
    """Distinct nonzero eigenvalues and the cyclic step gains built from them.

    ``weighting`` records which operator the eigenvalues belong to:
    ``"laplacian"`` for L itself, ``"cost"`` for diag(2 alpha) L.
    """

    eigenvalues: np.ndarray
    L: np.ndarray
    weighting: str = "laplacian"

    @property
    def K(self) -> int:
        return len(self.eigenvalues)

    @property
    def step_gains(self) -> np.ndarray:
        return 1.0 / self.eigenvalues

    def c(self, k: int) -> float:
        """Gain for iteration ``k`` (1-based), cycling through the plan."""
        return float(1.0 / self.eigenvalues[(k - 1) % self.K])

    @classmethod
    def from_topology(cls, topology: Topology) -> "FacaPlan":
        if not is_connected(topology):
            raise DisconnectedTopology("FACA needs a connected topology")
        L = laplacian(topology)
        return cls(spectrum(L).distinct_nonzero, L, "laplacian")

    @classmethod
    def cost_weighted(cls, topology: Topology, params: Sequence[GeneratorParams]) -> "FacaPlan":
        """Gains from the spectrum of diag(2 alpha) L, the operator that moves lambda in the coupled update."""
        if not is_connected(topology):
            raise DisconnectedTopology("FACA needs a connected topology")
        L = laplacian(topology)
        alpha, _ = coefficients(params)
        s = np.sqrt(2.0 * alpha)
        w, _ = jacobi_eigh(s[:, None] * L * s[None, :])
        nonzero = w[w > 1e-9 * max(1.0, w[-1])]
        return cls(distinct_values(nonzero, 1e-9 * max(1.0, w[-1])), L, "cost")


def faca_consensus(values, plan: FacaPlan, steps: int | None = None) -> np.ndarray:
    """Apply ``x <- (I - c_k L) x`` for k = 1..K (or ``steps``)."""
    x = np.array(values, dtype=float)
    if plan.L.shape[0] != x.size:
        raise ValidationError(f"plan is for {plan.L.shape[0]} nodes, got {x.size} values")
    for k in range(1, (plan.K if steps is None else steps) + 1):
        x = x - plan.c(k) * (plan.L @ x)
    return x


@dataclass(frozen=True)
class DiscreteState:
    lam: np.ndarray
    P: np.ndarray
    k: int = 0
    h: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lam", np.array(self.lam, dtype=float))
        object.__setattr__(self, "P", np.array(self.P, dtype=float))
        if not self.h > 0:
            raise ValidationError("h must be > 0")

    def z(self, params: Sequence[GeneratorParams]) -> np.ndarray:
        alpha, beta = coefficients(params)
        return self.P - (self.lam - beta) / (2.0 * alpha)


def discrete_update(state: DiscreteState, plan: FacaPlan, params: Sequence[GeneratorParams]) -> DiscreteState:
    alpha, beta = coefficients(params)
    c = plan.c(state.k + 1)
    Llam = plan.L @ state.lam
    z = state.P - (state.lam - beta) / (2.0 * alpha)
    W_lam = state.lam - c * Llam
    lam_next = 2.0 * alpha * (W_lam - state.lam + state.P + beta / (2.0 * alpha) - z_step(z, state.h))
    P_next = state.P - c * Llam
    return DiscreteState(lam_next, P_next, state.k + 1, state.h)


@dataclass
class DiscreteTrace:
    k: np.ndarray
    lam: np.ndarray
    P: np.ndarray
    max_z: np.ndarray
    consensus_err: np.ndarray

    def columns(self) -> list[str]:
        n = self.lam.shape[1]
        return (["k"] + [f"lambda_{i}" for i in range(n)] + [f"P_{i}" for i in range(n)]
                + ["max_z", "consensus_err"])

    def rows(self) -> np.ndarray:
        return np.column_stack([self.k, self.lam, self.P, self.max_z, self.consensus_err])


@dataclass
class DiscreteResult:
    solution: DispatchSolution
    trace: DiscreteTrace
    iterations: int
    plan: FacaPlan
    oracle: DispatchSolution
    max_deviation: float
    rounds: list = field(default_factory=list)


def _static_topology(schedule: TopologySchedule) -> Topology:
    if not schedule.is_static:
        raise ValidationError("discrete mode needs a static topology")
    return schedule.topologies[schedule.phases[0][1]]


def iterate(params: Sequence[GeneratorParams], plan: FacaPlan, P0, lam0, h: float, tol: float = 1e-3,
            max_iters: int | None = None) -> tuple[DiscreteState, DiscreteTrace]:
    """Run ``discrete_update`` until consensus and consistency are both within ``tol``."""
    if max_iters is None:
        max_iters = int(10 * (plan.K + 1.0 / (h * tol)))
    state = DiscreteState(lam0, P0, 0, h)
    ks, lams, Ps, zs, errs = [], [], [], [], []
    while True:
        z = np.abs(state.z(params)).max()
        err = float(np.ptp(state.lam))
        ks.append(state.k)
        lams.append(state.lam)
        Ps.append(state.P)
        zs.append(z)
        errs.append(err)
        if err <= tol and z <= tol:
            break
        if state.k >= max_iters:
            raise MaxIterations(f"no convergence in {max_iters} iterations (spread {err:.3e}, max|z| {z:.3e})")
        state = discrete_update(state, plan, params)
    trace = DiscreteTrace(np.array(ks), np.array(lams), np.array(Ps), np.array(zs), np.array(errs))
    return state, trace


def discrete_solve(scenario, h: float | None = None, tol: float | None = None, max_iters: int | None = None,
                   weighting: str = "cost", constrained: bool = False,
                   fixing: str = "dominant") -> DiscreteResult:
    """Discrete-time dispatch on a static topology.

    ``weighting="cost"`` takes step gains from diag(2 alpha) L, which reaches
    the optimum after one gain cycle; ``"laplacian"`` uses L's own spectrum
    and only contracts slowly when the alphas differ from 1/2.  With
    ``constrained`` the finite-step averaging replaces the continuous
    consensus inside the pin-and-correct loop.
    """
    from fxted.constrained import algorithm1  # circular at import time

    params = scenario.generators
    h = h if h is not None else scenario.h
    tol = tol if tol is not None else scenario.tol
    topo = _static_topology(scenario.topology_schedule)
    if weighting == "cost":
        plan = FacaPlan.cost_weighted(topo, params)
    elif weighting == "laplacian":
        plan = FacaPlan.from_topology(topo)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    P0 = scenario.initial_P()
    lam0 = scenario.lambda0
    if lam0 is None:
        alpha, beta = coefficients(params)
        lam0 = 2.0 * alpha * P0 + beta
    P_tot = total_demand(scenario.loads, 0.0)
    state, trace = iterate(params, plan, P0, lam0, h, tol, max_iters or scenario.max_iters)
    alpha, beta = coefficients(params)
    lam_c = float(np.mean(state.lam))
    sol = DispatchSolution(lam_c, (lam_c - beta) / (2.0 * alpha))
    oracle = unconstrained_optimum(params, P_tot)
    rounds = []
    if constrained:
        avg_plan = FacaPlan.from_topology(topo)

        def stage(_):
            return lam_c, sol.P_star, None

        def consensus(values, t0):
            return faca_consensus(values, avg_plan), 0.0

        res = algorithm1(scenario, fixing=fixing, consensus=consensus, unconstrained_stage=stage)
        sol, oracle, rounds = res.solution, res.oracle, res.rounds
    dev = float(np.max(np.abs(sol.P_star - oracle.P_star)))
    return DiscreteResult(sol, trace, int(state.k), plan, oracle, dev, rounds)
