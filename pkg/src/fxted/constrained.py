"""Capacity-constrained dispatch on top of the unconstrained protocol.

The loop: solve the unconstrained problem with the continuous dynamics, pin
generators that break their limits, correct the shared incremental cost with
two average-consensus runs (one for the pinned generators' mismatch, one for
the free generators' inverse curvature), and re-dispatch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from fxted.dynamics import (Gains, Trace, default_lambda0, integrate, settling_bounds, stable_smoothing_eps,
                            step_index)
from fxted.errors import AllSaturated, NotConverged, ValidationError
from fxted.graphnet import TopologySchedule
from fxted.model import GeneratorParams, LoadSchedule, coefficients, limits, total_demand
from fxted.oracle import DispatchSolution, constrained_optimum, kkt_violations

log = logging.getLogger(__name__)

CONSENSUS_TOL = 1e-9


@dataclass
class SaturationState:
    """Pinned generators: ``fixed_P[i]`` is the limit generator ``i`` sits at."""

    theta: set[int] = field(default_factory=set)
    omega: set[int] = field(default_factory=set)
    fixed_P: dict[int, float] = field(default_factory=dict)
    at_max: set[int] = field(default_factory=set)


@dataclass
class ConsensusPair:
    y: np.ndarray
    z: np.ndarray

    @classmethod
    def initial(cls, lam: float, P, params: Sequence[GeneratorParams], theta) -> "ConsensusPair":
        alpha, beta = coefficients(params)
        P = np.asarray(P, dtype=float)
        n = len(params)
        y = np.zeros(n)
        z = np.zeros(n)
        for i in range(n):
            if i in theta:
                y[i] = (lam - 2.0 * alpha[i] * P[i] - beta[i]) / (2.0 * alpha[i])
            else:
                z[i] = 1.0 / (2.0 * alpha[i])
        return cls(y, z)


def detect_violations(P, params: Sequence[GeneratorParams], theta=()) -> set[int]:
    lo, hi = limits(params)
    P = np.asarray(P, dtype=float)
    return {i for i in range(len(params)) if i not in theta and (P[i] < lo[i] or P[i] > hi[i])}


def violation_sides(P, params: Sequence[GeneratorParams], omega) -> dict[int, str]:
    lo, hi = limits(params)
    return {i: ("max" if P[i] > hi[i] else "min") for i in omega}


def dominant_side(P, params: Sequence[GeneratorParams], omega) -> set[int]:
    """Keep only the violators on the side with the larger total violation.

    Ties keep both sides.  Pins chosen this way are always correct for the
    final optimum, so no generator ever has to be released.
    """
    lo, hi = limits(params)
    over = {i for i in omega if P[i] > hi[i]}
    under = omega - over
    excess = sum(P[i] - hi[i] for i in over)
    deficit = sum(lo[i] - P[i] for i in under)
    if excess > deficit:
        return over
    if deficit > excess:
        return under
    return set(omega)


def saturate_and_dispatch(lam: float, params: Sequence[GeneratorParams], fixed_P: dict[int, float]) -> np.ndarray:
    alpha, beta = coefficients(params)
    P = (lam - beta) / (2.0 * alpha)
    for i, v in fixed_P.items():
        P[i] = v
    return P


@numba.njit(cache=True)
def _consensus_kernel(x, ei, ej, p, mu1, mu2, eps, dt, nsteps, tol):
    N = x.shape[0]
    dx = np.zeros(N)
    for s in range(nsteps):
        for i in range(N):
            dx[i] = 0.0
        for m in range(ei.shape[0]):
            i = ei[m]
            j = ej[m]
            d = x[j] - x[i]
            if eps > 0.0:
                sg = min(1.0, max(-1.0, d / eps))
            else:
                sg = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
            a = abs(d)
            f = p * (sg + math.copysign(a ** mu1, d) + math.copysign(a ** mu2, d))
            dx[i] += f
            dx[j] -= f
        lo = np.inf
        hi = -np.inf
        for i in range(N):
            x[i] += dt * dx[i]
            if x[i] < lo:
                lo = x[i]
            if x[i] > hi:
                hi = x[i]
        if hi - lo <= tol:
            return s + 1
    return nsteps


@dataclass
class ConsensusRun:
    values: np.ndarray
    time: float
    steps: int
    T2: float


def average_consensus_fxt(values, schedule: TopologySchedule, gains: Gains, t0: float = 0.0,
                          tol: float = CONSENSUS_TOL, detail: bool = False):
    """Fixed-time average consensus (the protocol with every alpha = 1/2).

    Every node ends at the arithmetic mean of ``values``; the pairwise flows
    are antisymmetric so the sum is conserved step by step.  A boundary layer
    sized for Euler stability replaces the bare sign when ``gains`` has none,
    otherwise the chatter would sit far above ``tol``.
    """
    x = np.array(values, dtype=float)
    n = x.size
    if schedule.n != n:
        raise ValidationError(f"schedule has {schedule.n} nodes for {n} values")
    half = [GeneratorParams(0.5, 0.0)] * n
    T2 = settling_bounds(half, schedule, gains).T2
    if n <= 1 or np.ptp(x) <= tol:
        out = x if not detail else ConsensusRun(x, 0.0, 0, T2)
        return out
    eps = max(gains.smoothing_eps, stable_smoothing_eps(half, schedule, gains, alpha_override=0.5))
    dt = gains.dt
    k = step_index(t0, dt)
    k_start = k
    k_end = k + step_index(2.0 * T2, dt) + 1
    switches = [(step_index(s, dt), idx) for s, idx in schedule.phases]
    while k < k_end:
        idx = switches[0][1]
        nxt = k_end
        for s_k, j in switches:
            if s_k <= k:
                idx = j
            else:
                nxt = min(nxt, s_k)
                break
        nxt = min(nxt, k + (1 << 16))
        ei, ej = schedule.topologies[idx].edge_arrays()
        m = nxt - k
        done = _consensus_kernel(x, ei, ej, gains.p, gains.mu1, gains.mu2, eps, dt, m, tol)
        k += done
        if not np.all(np.isfinite(x)):
            raise NotConverged(f"average consensus diverged after {(k - k_start) * dt:.4g}s "
                               f"(dt={dt:g} too coarse for p={gains.p:g})")
        if done < m or np.ptp(x) <= tol:
            elapsed = (k - k_start) * dt
            return ConsensusRun(x, elapsed, k - k_start, T2) if detail else x
    raise NotConverged(f"average consensus spread {np.ptp(x):.3e} > {tol:g} after 2*T2 = {2 * T2:.4g}s "
                       f"(dt={dt:g} too coarse for p={gains.p:g}?)")


@dataclass
class RoundRecord:
    round: int
    omega: list[int]
    theta: list[int]
    sides: dict[int, str]
    lambda_before: float
    y_c: float
    z_c: float
    lambda_after: float
    P: list[float]

    def to_dict(self) -> dict:
        return {"round": self.round, "omega": self.omega, "theta": self.theta,
                "sides": {str(k): v for k, v in self.sides.items()},
                "lambda_before": self.lambda_before, "y_c": self.y_c, "z_c": self.z_c,
                "lambda_after": self.lambda_after, "P": self.P}


@dataclass
class Algorithm1Result:
    solution: DispatchSolution
    trace: Trace
    rounds: list[RoundRecord]
    lambda_tilde: float
    oracle: DispatchSolution
    max_deviation: float
    kkt_audit: list[str]
    consensus_time: float = 0.0

    @property
    def matches_oracle(self) -> bool:
        return not self.kkt_audit

    def to_dict(self, params=None) -> dict:
        return {"solution": self.solution.to_dict(params), "lambda_tilde": self.lambda_tilde,
                "rounds": [r.to_dict() for r in self.rounds],
                "oracle": self.oracle.to_dict(params), "max_deviation": self.max_deviation,
                "kkt_audit": self.kkt_audit, "consensus_time": self.consensus_time}


def algorithm1(scenario, fixing: str = "dominant", stage_tol: float = 1e-8, audit_tol: float = 1e-3,
               P0=None, lam0=None, consensus: Callable | None = None, unconstrained_stage=None) -> Algorithm1Result:
    """Constrained dispatch: unconstrained fixed-time solve, then pin-and-correct rounds.

    ``fixing="literal"`` pins every violator each round; ``"dominant"`` pins
    only the side with the larger total violation, which never needs a pin
    undone.  The first stage runs noise-free on the initial demand.
    ``consensus`` replaces the averaging routine (the discrete solver plugs in
    its finite-step version); ``unconstrained_stage`` likewise replaces the
    first stage and must return ``(lambda, P, trace)``.
    """
    if fixing not in ("dominant", "literal"):
        raise ValueError(f"unknown fixing rule {fixing!r}")
    params = scenario.generators
    n = len(params)
    schedule = scenario.topology_schedule
    gains = scenario.gains
    P_tot = total_demand(scenario.loads, 0.0)

    if unconstrained_stage is None:
        if gains.smoothing_eps == 0.0 and n > 1:
            gains = Gains(**{**gains.to_dict(), "smoothing_eps": stable_smoothing_eps(params, schedule, gains)})
        P0 = scenario.initial_P() if P0 is None else np.asarray(P0, dtype=float)
        if lam0 is None:
            lam0 = scenario.lambda0 if scenario.lambda0 is not None else default_lambda0(params, P0)
        bound = settling_bounds(params, schedule, gains).total
        trace = integrate(params, schedule, gains, P0, lam0, t_end=max(scenario.t_end, bound),
                          loads=LoadSchedule(scenario.loads.loads), assignment=scenario.assignment,
                          tol=stage_tol, hold=0.0)
        if trace.first_convergence_time is None:
            raise NotConverged(f"unconstrained stage did not reach tol {stage_tol:g}")
        lam = float(np.mean(trace.lam[-1]))
        P = trace.P[-1].copy()
        t_clock = float(trace.t[-1])
    else:
        lam, P, trace = unconstrained_stage(scenario)
        t_clock = 0.0
    lam_tilde = lam

    if consensus is None:
        def consensus(values, t0):
            run = average_consensus_fxt(values, schedule, scenario.gains, t0=t0, detail=True)
            return run.values, run.time

    sat = SaturationState()
    rounds: list[RoundRecord] = []
    total_consensus_time = 0.0
    for r in range(1, n + 1):
        omega = detect_violations(P, params, sat.theta)
        if not omega:
            break
        if fixing == "dominant":
            omega = dominant_side(P, params, omega)
        sides = violation_sides(P, params, omega)
        lo, hi = limits(params)
        for i in omega:
            sat.fixed_P[i] = float(hi[i] if sides[i] == "max" else lo[i])
            if sides[i] == "max":
                sat.at_max.add(i)
        sat.omega = set(omega)
        sat.theta |= omega
        lam_before = lam
        P = saturate_and_dispatch(lam, params, sat.fixed_P)
        # the correction is measured from the unconstrained lambda with the whole
        # pinned set; measuring from the already-corrected lambda would count
        # earlier pins twice
        pair = ConsensusPair.initial(lam_tilde, P, params, sat.theta)
        y, ty = consensus(pair.y, t_clock)
        t_clock += ty
        z, tz = consensus(pair.z, t_clock)
        t_clock += tz
        total_consensus_time += ty + tz
        y_c, z_c = float(np.mean(y)), float(np.mean(z))
        if len(sat.theta) == n or z_c == 0.0:
            raise AllSaturated("every generator is saturated; dispatch is the limits themselves",
                               P=saturate_and_dispatch(lam, params, sat.fixed_P))
        lam = lam_tilde + y_c / z_c
        P = saturate_and_dispatch(lam, params, sat.fixed_P)
        rounds.append(RoundRecord(r, sorted(omega), sorted(sat.theta), sides, lam_before, y_c, z_c, lam,
                                  [float(v) for v in P]))
    else:
        if detect_violations(P, params, sat.theta):
            log.warning("violations remain after %d rounds", n)

    solution = DispatchSolution(lam, P, sat.theta, sat.at_max)
    oracle = constrained_optimum(params, P_tot)
    dev = float(np.max(np.abs(solution.P_star - oracle.P_star)))
    audit = []
    if dev > audit_tol:
        audit.append(f"dispatch differs from the KKT oracle by {dev:.6g} MW (> {audit_tol:g})")
    audit += kkt_violations(params, P_tot, solution, tol=audit_tol)
    if audit:
        log.warning("KKT audit: %s", "; ".join(audit))
    return Algorithm1Result(solution, trace, rounds, lam_tilde, oracle, dev, audit, total_consensus_time)

