"""Continuous-time fixed-time dispatch protocol.

State per generator bus: scheduled power ``P`` and incremental cost ``lam``.
Power moves along the neighbours' incremental-cost disagreement through the
sign / sgn^mu1 / sgn^mu2 terms; the incremental cost follows the power and is
pulled toward consistency ``P = (lam - beta) / (2 alpha)`` by sgn^nu1 and
sgn^nu2 terms.

Integration is fixed-step explicit Euler.  ``rhs`` and ``step`` are the numpy
reference; ``simulate`` runs the same arithmetic in a numba kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from fxted.errors import ValidationError
from fxted.graphnet import Topology, TopologySchedule, lambda2_star, lambda_max_star
from fxted.model import (Assignment, GeneratorParams, LoadSchedule, SystemState, aggregate, coefficients,
                         total_demand)

DEFAULT_TOL = 1e-3
_CHUNK = 1 << 16


@dataclass(frozen=True)
class Gains:
    p: float = 1.0
    mu1: float = 0.8
    mu2: float = 1.2
    nu1: float = 0.8
    nu2: float = 1.2
    dt: float = 1e-4
    smoothing_eps: float = 0.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValidationError(f"p must be > 0 (got {self.p})")
        if not 0 < self.mu1 < 1 < self.mu2:
            raise ValidationError(f"need 0 < mu1 < 1 < mu2 (got {self.mu1}, {self.mu2})")
        if not 0 < self.nu1 < 1 < self.nu2:
            raise ValidationError(f"need 0 < nu1 < 1 < nu2 (got {self.nu1}, {self.nu2})")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0 (got {self.dt})")
        if self.smoothing_eps < 0:
            raise ValidationError("smoothing_eps must be >= 0")

    def to_dict(self) -> dict:
        return {"p": self.p, "mu1": self.mu1, "mu2": self.mu2, "nu1": self.nu1, "nu2": self.nu2,
                "dt": self.dt, "smoothing_eps": self.smoothing_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "Gains":
        known = {"p", "mu1", "mu2", "nu1", "nu2", "dt", "smoothing_eps"}
        return cls(**{k: float(v) for k, v in d.items() if k in known})


@dataclass(frozen=True)
class NoiseModel:
    """Additive per-bus disturbance, redrawn every Euler step.

    ``uniform`` draws from [-bound, bound]; ``truncated_gaussian`` draws
    N(0, sigma^2) clipped symmetrically at 3 sigma.  Both are zero-mean and
    bounded by ``clip``.
    """

    kind: str = "none"
    bound: float = 0.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "truncated_gaussian"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if self.bound < 0 or self.sigma < 0:
            raise ValidationError("noise bound and sigma must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.clip > 0

    @property
    def clip(self) -> float:
        if self.kind == "uniform":
            return self.bound
        if self.kind == "truncated_gaussian":
            return 3.0 * self.sigma
        return 0.0

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-self.bound, self.bound, size=shape)
        if self.kind == "truncated_gaussian":
            return np.clip(rng.normal(0.0, self.sigma, size=shape), -self.clip, self.clip)
        return np.zeros(shape)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        if self.kind == "uniform":
            d["bound"] = self.bound
        elif self.kind == "truncated_gaussian":
            d["sigma"] = self.sigma
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "NoiseModel":
        if not d:
            return cls()
        kind = d.get("kind", "none")
        sigma = float(d.get("sigma", 0.0))
        if "variance" in d:
            sigma = math.sqrt(float(d["variance"]))
        return cls(kind, float(d.get("bound", 0.0)), sigma, int(d.get("seed", 0)))


def disturbance_bound(noise: NoiseModel, params: Sequence[GeneratorParams]) -> float:
    """Upper bound on max_i |w_i - Gamma/(2 alpha_i N) sum_j w_j| from the clip level."""
    if not noise.active:
        return 0.0
    alpha, _ = coefficients(params)
    gamma = 1.0 / np.sum(1.0 / (2.0 * alpha))
    return noise.clip * (1.0 + gamma / (2.0 * alpha.min()))


@dataclass(frozen=True)
class SettlingBounds:
    T1: float
    T2: float
    p_min_gain: float
    c1: float
    c2: float
    Delta: float

    @property
    def total(self) -> float:
        return self.T1 + self.T2

    def to_dict(self) -> dict:
        return {"T1": self.T1, "T2": self.T2, "T_total": self.total, "p_min_gain": self.p_min_gain,
                "c1": self.c1, "c2": self.c2, "Delta": self.Delta}


def settling_bounds(params: Sequence[GeneratorParams], schedule: TopologySchedule, gains: Gains,
                    Delta: float = 0.0) -> SettlingBounds:
    """Fixed-time bounds: T1 for consistency, T2 for consensus, and the gain needed to beat noise."""
    if Delta < 0:
        raise ValidationError("Delta must be >= 0")
    alpha, _ = coefficients(params)
    N = len(params)
    nu1, nu2, mu1, mu2, p = gains.nu1, gains.nu2, gains.mu1, gains.mu2, gains.p
    T1 = (2.0 / (2.0 ** ((1 + nu1) / 2) * (1 - nu1))
          + 2.0 * N ** ((nu2 - 1) / 2) / (2.0 ** ((1 + nu2) / 2) * (nu2 - 1)))
    lam2 = lambda2_star(schedule)
    if math.isinf(lam2):
        # one bus: nothing to agree on
        return SettlingBounds(T1, 0.0, 0.0, math.inf, math.inf, Delta)
    a_min, a_max = float(alpha.min()), float(alpha.max())
    base = lam2 * a_min
    c1 = p * 2.0 ** mu1 * base ** ((1 + mu1) / 2)
    c2 = p * 2.0 ** mu2 / N ** (mu2 - 1) * base ** ((1 + mu2) / 2)
    T2 = 2.0 / (c1 * (1 - mu1)) + 2.0 / (c2 * (mu2 - 1))
    p_min = 2.0 * Delta * math.sqrt(N * a_max / (lam2 * a_min))
    return SettlingBounds(T1, T2, p_min, c1, c2, Delta)


def stable_smoothing_eps(params: Sequence[GeneratorParams], schedule: TopologySchedule, gains: Gains,
                         alpha_override: float | None = None) -> float:
    """Boundary-layer width for which the in-layer linear consensus is Euler-stable.

    Inside the layer the sign term acts like gain p/eps on the weighted
    Laplacian diag(2 alpha) L; eps = dt p max(2 alpha) lambda_max(L) keeps the
    step's spectral radius at 1.
    """
    if schedule.n <= 1:
        return 0.0
    if alpha_override is not None:
        two_a = 2.0 * alpha_override
    else:
        alpha, _ = coefficients(params)
        two_a = float(2.0 * alpha.max())
    return gains.dt * gains.p * two_a * lambda_max_star(schedule)


def sgn_mu(x, mu):
    """``|x|**mu * sign(x)``, elementwise; odd in ``x`` and 0 at 0."""
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.abs(x) ** mu
    return float(out) if out.ndim == 0 else out


def _sign(x, eps):
    if eps > 0:
        return np.clip(x / eps, -1.0, 1.0)
    return np.sign(x)


def consistency_error(P, lam, params: Sequence[GeneratorParams]) -> np.ndarray:
    alpha, beta = coefficients(params)
    return np.asarray(P) - (np.asarray(lam) - beta) / (2.0 * alpha)


def rhs(state: SystemState, topology: Topology, params: Sequence[GeneratorParams], gains: Gains,
        noise_sample=None) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives ``(dP, dlam)`` at ``state`` for a fixed topology."""
    alpha, beta = coefficients(params)
    if topology.n != len(params):
        raise ValidationError(f"topology has {topology.n} nodes for {len(params)} generators")
    lam = state.lam
    A = topology.adjacency
    diff = lam[None, :] - lam[:, None]  # diff[i, j] = lam_j - lam_i
    flux = _sign(diff, gains.smoothing_eps) + sgn_mu(diff, gains.mu1) + sgn_mu(diff, gains.mu2)
    dP = gains.p * np.sum(A * flux, axis=1)
    if noise_sample is not None:
        dP = dP + np.asarray(noise_sample, dtype=float)
    e = state.P - (lam - beta) / (2.0 * alpha)
    dlam = 2.0 * alpha * (dP + sgn_mu(e, gains.nu1) + sgn_mu(e, gains.nu2))
    return dP, dlam


def step_index(t: float, dt: float) -> int:
    """Grid index of time ``t``; off-grid times snap to the next grid point."""
    r = t / dt
    k = round(r)
    if abs(r - k) <= 1e-9 * max(1.0, abs(r)):
        return int(k)
    return int(math.ceil(r))


def step(state: SystemState, schedule: TopologySchedule, params: Sequence[GeneratorParams], gains: Gains,
         noise: NoiseModel | None = None, rng: np.random.Generator | None = None,
         loads: LoadSchedule | None = None, assignment: Assignment | None = None) -> SystemState:
    """One explicit Euler step.

    Load events in (t, t + dt] are applied after the step by adding each
    load's change to its assigned generator.
    """
    k = step_index(state.t, gains.dt)
    topo = schedule.topologies[_phase_topology_at_step(schedule, k, gains.dt)]
    sample = None
    if noise is not None and noise.active:
        if rng is None:
            rng = noise.rng()
        sample = noise.sample(rng, len(params))
    dP, dlam = rhs(state, topo, params, gains, sample)
    P = state.P + gains.dt * dP
    lam = state.lam + gains.dt * dlam
    t_next = (k + 1) * gains.dt
    if loads is not None and assignment is not None:
        for te, new in loads.events:
            if step_index(te, gains.dt) == k + 1:
                old = loads.demands_at(state.t)
                P = P + aggregate([b - a for a, b in zip(old, new)], assignment)
    return SystemState(P, lam, t_next)


def lyapunov_V(state: SystemState, params: Sequence[GeneratorParams]) -> float:
    """Weighted consensus disagreement 1/2 sum (1/2a_i)(lam_i - lam_bar)^2."""
    return float(_lyapunov(np.atleast_2d(state.lam), params)[0])


def _lyapunov(lam: np.ndarray, params) -> np.ndarray:
    alpha, _ = coefficients(params)
    w = 1.0 / (2.0 * alpha)
    lam_bar = (lam @ w) / w.sum()
    return 0.5 * ((lam - lam_bar[:, None]) ** 2 @ w)


def _phase_topology_at_step(schedule: TopologySchedule, k: int, dt: float) -> int:
    idx = schedule.phases[0][1]
    for start, topo in schedule.phases:
        if step_index(start, dt) <= k:
            idx = topo
        else:
            break
    return idx


@numba.njit(cache=True, inline="always")
def _spow(x, mu):
    if x > 0.0:
        return x ** mu
    if x < 0.0:
        return -((-x) ** mu)
    return 0.0


@numba.njit(cache=True)
def _euler_kernel(P, lam, ei, ej, alpha, beta, p, mu1, mu2, nu1, nu2, eps, dt,
                  k0, nsteps, noise, tol, status, hold, stride, rec_k, rec_P, rec_lam, nrec):
    """Advance ``nsteps`` Euler steps in place.

    status = [first consensus step, first consistency step, first joint step, stop step];
    -1 means not yet.  Returns the number of steps taken.
    """
    N = P.shape[0]
    dP = np.zeros(N)
    has_noise = noise.shape[0] > 0
    for s in range(nsteps):
        for i in range(N):
            dP[i] = 0.0
        for m in range(ei.shape[0]):
            i = ei[m]
            j = ej[m]
            d = lam[j] - lam[i]
            if eps > 0.0:
                sg = d / eps
                if sg > 1.0:
                    sg = 1.0
                elif sg < -1.0:
                    sg = -1.0
            else:
                sg = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
            f = p * (sg + _spow(d, mu1) + _spow(d, mu2))
            dP[i] += f
            dP[j] -= f
        if has_noise:
            for i in range(N):
                dP[i] += noise[s, i]
        for i in range(N):
            e = P[i] - (lam[i] - beta[i]) / (2.0 * alpha[i])
            dl = 2.0 * alpha[i] * (dP[i] + _spow(e, nu1) + _spow(e, nu2))
            P[i] += dt * dP[i]
            lam[i] += dt * dl
        k = k0 + s + 1
        if stride > 0 and k % stride == 0:
            r = nrec[0]
            rec_k[r] = k
            for i in range(N):
                rec_P[r, i] = P[i]
                rec_lam[r, i] = lam[i]
            nrec[0] = r + 1
        if status[2] < 0:
            lo = lam[0]
            hi = lam[0]
            emax = 0.0
            for i in range(N):
                if lam[i] < lo:
                    lo = lam[i]
                if lam[i] > hi:
                    hi = lam[i]
                e = abs(P[i] - (lam[i] - beta[i]) / (2.0 * alpha[i]))
                if e > emax:
                    emax = e
            if status[0] < 0 and hi - lo <= tol:
                status[0] = k
            if status[1] < 0 and emax <= tol:
                status[1] = k
            if hi - lo <= tol and emax <= tol:
                status[2] = k
                if hold >= 0:
                    status[3] = k + hold
        if status[3] >= 0 and k >= status[3]:
            return s + 1
    return nsteps


@dataclass
class Trace:
    """Sampled trajectory plus convergence diagnostics."""

    t: np.ndarray
    P: np.ndarray
    lam: np.ndarray
    P_tot: np.ndarray
    consensus_err: np.ndarray
    balance_residual: np.ndarray
    V: np.ndarray
    max_e: np.ndarray
    first_consensus_time: float | None = None
    first_consistency_time: float | None = None
    first_convergence_time: float | None = None
    event_times: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.P.shape[1]

    @property
    def final_state(self) -> SystemState:
        return SystemState(self.P[-1], self.lam[-1], float(self.t[-1]))

    def columns(self) -> list[str]:
        n = self.n
        return (["t"] + [f"lambda_{i}" for i in range(n)] + [f"P_{i}" for i in range(n)]
                + ["consensus_err", "balance_residual", "V"])

    def rows(self) -> np.ndarray:
        return np.column_stack([self.t, self.lam, self.P, self.consensus_err, self.balance_residual, self.V])

    @classmethod
    def empty(cls, n: int) -> "Trace":
        z = np.zeros(0)
        return cls(z, np.zeros((0, n)), np.zeros((0, n)), z, z, z, z, z)


def _finish_trace(ks, Ps, lams, ptots, params, dt, status, events, meta) -> Trace:
    t = np.asarray(ks, dtype=float) * dt
    P = np.asarray(Ps)
    lam = np.asarray(lams)
    ptot = np.asarray(ptots)
    alpha, beta = coefficients(params)
    e = P - (lam - beta) / (2.0 * alpha)
    return Trace(
        t=t, P=P, lam=lam, P_tot=ptot,
        consensus_err=lam.max(axis=1) - lam.min(axis=1),
        balance_residual=np.abs(P.sum(axis=1) - ptot),
        V=_lyapunov(lam, params),
        max_e=np.abs(e).max(axis=1),
        first_consensus_time=None if status[0] < 0 else status[0] * dt,
        first_consistency_time=None if status[1] < 0 else status[1] * dt,
        first_convergence_time=None if status[2] < 0 else status[2] * dt,
        event_times=events, meta=meta,
    )


def integrate(params: Sequence[GeneratorParams], schedule: TopologySchedule, gains: Gains,
              P0, lam0, t_end: float, loads: LoadSchedule | None = None,
              assignment: Assignment | None = None, noise: NoiseModel | None = None,
              tol: float = DEFAULT_TOL, sample_stride: int | None = None, hold: float | None = None,
              t0: float = 0.0) -> Trace:
    """Euler-integrate the protocol from ``(P0, lam0)`` over ``[t0, t_end]``.

    ``hold``: if given, stop that many seconds after the first joint
    convergence (consensus and consistency both within ``tol``) instead of
    running to ``t_end``.
    """
    n = len(params)
    if schedule.n != n:
        raise ValidationError(f"schedule has {schedule.n} nodes for {n} generators")
    alpha, beta = coefficients(params)
    dt = gains.dt
    P = np.array(P0, dtype=float)
    lam = np.array(lam0, dtype=float)
    if P.shape != (n,) or lam.shape != (n,):
        raise ValidationError("initial P and lambda must have one entry per generator")
    k = step_index(t0, dt)
    k_end = step_index(t_end, dt)
    stride = sample_stride or max(1, (k_end - k) // 2000)
    hold_steps = -1 if hold is None else step_index(hold, dt)

    switch_steps = [(step_index(s, dt), idx) for s, idx in schedule.phases]
    event_steps = []
    if loads is not None and assignment is not None:
        event_steps = [(step_index(te, dt), d) for te, d in loads.events if step_index(te, dt) > k]
    edge_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    demands = loads.demands_at(t0) if loads is not None else None
    ptot = total_demand(loads, t0) if loads is not None else float(P.sum())

    status = np.full(4, -1, dtype=np.int64)
    e0 = np.abs(P - (lam - beta) / (2.0 * alpha)).max()
    spread0 = lam.max() - lam.min()
    if spread0 <= tol:
        status[0] = k
    if e0 <= tol:
        status[1] = k
    if spread0 <= tol and e0 <= tol:
        status[2] = k
        if hold_steps >= 0:
            status[3] = k + hold_steps

    rng = noise.rng() if noise is not None and noise.active else None
    ks, Ps, lams, ptots = [k], [P.copy()], [lam.copy()], [ptot]
    applied_events: list[float] = []
    ev_i = 0
    empty_noise = np.zeros((0, n))
    while k < k_end and not (status[3] >= 0 and k >= status[3]):
        topo_idx = switch_steps[0][1]
        next_switch = k_end
        for s_k, idx in switch_steps:
            if s_k <= k:
                topo_idx = idx
            else:
                next_switch = s_k
                break
        nxt = min(k_end, next_switch, k + _CHUNK)
        if ev_i < len(event_steps):
            nxt = min(nxt, event_steps[ev_i][0])
        if status[3] >= 0:
            nxt = min(nxt, int(status[3]))
        m = nxt - k
        if topo_idx not in edge_cache:
            edge_cache[topo_idx] = schedule.topologies[topo_idx].edge_arrays()
        ei, ej = edge_cache[topo_idx]
        block = noise.sample(rng, (m, n)) if rng is not None else empty_noise
        cap = m // stride + 2
        rec_k = np.zeros(cap, dtype=np.int64)
        rec_P = np.zeros((cap, n))
        rec_lam = np.zeros((cap, n))
        nrec = np.zeros(1, dtype=np.int64)
        done = _euler_kernel(P, lam, ei, ej, alpha, beta, gains.p, gains.mu1, gains.mu2, gains.nu1, gains.nu2,
                             gains.smoothing_eps, dt, k, m, block, tol, status, hold_steps, stride,
                             rec_k, rec_P, rec_lam, nrec)
        r = int(nrec[0])
        ks.extend(rec_k[:r].tolist())
        Ps.extend(rec_P[:r])
        lams.extend(rec_lam[:r])
        ptots.extend([ptot] * r)
        k += int(done)
        if ev_i < len(event_steps) and k == event_steps[ev_i][0]:
            new = event_steps[ev_i][1]
            P += aggregate([b - a for a, b in zip(demands, new)], assignment)
            demands = new
            ptot = float(sum(new))
            applied_events.append(k * dt)
            ev_i += 1
            ks.append(k)
            Ps.append(P.copy())
            lams.append(lam.copy())
            ptots.append(ptot)
    if ks[-1] != k:
        ks.append(k)
        Ps.append(P.copy())
        lams.append(lam.copy())
        ptots.append(ptot)
    meta = {"dt": dt, "tol": tol, "stride": stride, "steps": k - step_index(t0, dt)}
    return _finish_trace(ks, Ps, lams, ptots, params, dt, status, applied_events, meta)


def default_lambda0(params: Sequence[GeneratorParams], P0) -> np.ndarray:
    """Each bus starts at its own marginal cost, so the consistency error is 0 at t=0."""
    alpha, beta = coefficients(params)
    return 2.0 * alpha * np.asarray(P0, dtype=float) + beta


def simulate(scenario, tol: float = DEFAULT_TOL, hold: float | None = None, sample_stride: int | None = None,
             gains: Gains | None = None, P0=None, lam0=None, t_end: float | None = None,
             noise: NoiseModel | None = None) -> Trace:
    """Run a scenario's continuous dynamics; keyword arguments override scenario fields."""
    params = scenario.generators
    gains = gains or scenario.gains
    if P0 is None:
        P0 = scenario.initial_P()
    if lam0 is None:
        lam0 = scenario.lambda0 if scenario.lambda0 is not None else default_lambda0(params, P0)
    return integrate(params, scenario.topology_schedule, gains, P0, lam0,
                     t_end if t_end is not None else scenario.t_end,
                     loads=scenario.loads, assignment=scenario.assignment,
                     noise=noise if noise is not None else scenario.noise,
                     tol=tol, sample_stride=sample_stride, hold=hold)
