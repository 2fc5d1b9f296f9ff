"""Reference solvers for the economic dispatch problem.

``constrained_optimum`` is the exact KKT point; ``brute_force_optimum`` is an
independent grid search used only to check it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fxted.errors import AllSaturated, Infeasible
from fxted.model import GeneratorParams, coefficients, limits, total_cost


@dataclass(frozen=True)
class DispatchSolution:
    lambda_star: float
    P_star: np.ndarray
    saturated: frozenset = field(default_factory=frozenset)
    at_max: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "P_star", np.asarray(self.P_star, dtype=float))
        object.__setattr__(self, "saturated", frozenset(int(i) for i in self.saturated))
        object.__setattr__(self, "at_max", frozenset(int(i) for i in self.at_max))

    @property
    def at_min(self) -> frozenset:
        return self.saturated - self.at_max

    def to_dict(self, params: Sequence[GeneratorParams] | None = None) -> dict:
        d = {"lambda_star": self.lambda_star,
             "P_star": [float(x) for x in self.P_star],
             "saturated": sorted(self.saturated),
             "at_max": sorted(self.at_max),
             "P_total": float(np.sum(self.P_star))}
        if params is not None:
            d["total_cost"] = total_cost(params, self.P_star)
        return d


def lambda_tilde(params: Sequence[GeneratorParams], P_tot: float) -> float:
    alpha, beta = coefficients(params)
    w = 1.0 / (2.0 * alpha)
    return (P_tot + float(np.sum(beta * w))) / float(np.sum(w))


def unconstrained_optimum(params: Sequence[GeneratorParams], P_tot: float) -> DispatchSolution:
    alpha, beta = coefficients(params)
    lam = lambda_tilde(params, P_tot)
    return DispatchSolution(lam, (lam - beta) / (2.0 * alpha))


def _check_feasible(params, P_tot):
    lo, hi = limits(params)
    slack = 1e-12 * max(1.0, abs(P_tot))
    if P_tot < lo.sum() - slack or P_tot > hi.sum() + slack:
        raise Infeasible(f"demand {P_tot} outside [{lo.sum()}, {hi.sum()}]")


def constrained_optimum(params: Sequence[GeneratorParams], P_tot: float) -> DispatchSolution:
    """Exact minimiser of total cost under balance and capacity limits.

    Active-set by variable fixing: solve the balance on the free set, then pin
    the violators on whichever side has the larger total violation.  Pins made
    this way are never undone, so at most N rounds run.
    """
    _check_feasible(params, P_tot)
    alpha, beta = coefficients(params)
    lo, hi = limits(params)
    n = len(params)
    w = 1.0 / (2.0 * alpha)
    free = np.ones(n, dtype=bool)
    P = np.zeros(n)
    at_max = np.zeros(n, dtype=bool)
    lam = math.nan
    for _ in range(n + 1):
        if not free.any():
            break
        residual = P_tot - P[~free].sum()
        lam = (residual + np.sum(beta[free] * w[free])) / np.sum(w[free])
        x = (lam - beta) / (2.0 * alpha)
        over = free & (x > hi)
        under = free & (x < lo)
        excess = np.sum(x[over] - hi[over])
        deficit = np.sum(lo[under] - x[under])
        if not over.any() and not under.any():
            P[free] = x[free]
            break
        if excess >= deficit:
            P[over] = hi[over]
            at_max |= over
            free &= ~over
            if excess == deficit:
                P[under] = lo[under]
                free &= ~under
        else:
            P[under] = lo[under]
            free &= ~under
    saturated = ~free
    if not free.any():
        mc = 2.0 * alpha * P + beta
        top = mc[at_max].max() if at_max.any() else -math.inf
        bottom = mc[saturated & ~at_max].min() if (saturated & ~at_max).any() else math.inf
        lam = top if math.isfinite(top) else bottom
        if math.isfinite(top) and math.isfinite(bottom):
            lam = 0.5 * (top + bottom)
    return DispatchSolution(float(lam), P, np.nonzero(saturated)[0], np.nonzero(at_max)[0])


def kkt_violations(params: Sequence[GeneratorParams], P_tot: float, sol: DispatchSolution,
                   tol: float = 1e-9) -> list[str]:
    """Human-readable list of broken optimality conditions (empty when optimal)."""
    alpha, beta = coefficients(params)
    lo, hi = limits(params)
    P = sol.P_star
    out = []
    if abs(P.sum() - P_tot) > tol * max(1.0, abs(P_tot)):
        out.append(f"balance: sum P = {P.sum()!r} != {P_tot!r}")
    mc = 2.0 * alpha * P + beta
    for i in range(len(params)):
        if P[i] < lo[i] - tol or P[i] > hi[i] + tol:
            out.append(f"gen {i}: P = {P[i]!r} outside [{lo[i]}, {hi[i]}]")
        if i in sol.at_max:
            if abs(P[i] - hi[i]) > tol:
                out.append(f"gen {i}: flagged at max but P = {P[i]!r}")
            if mc[i] > sol.lambda_star + tol:
                out.append(f"gen {i}: at max with marginal cost {mc[i]!r} > lambda {sol.lambda_star!r}")
        elif i in sol.saturated:
            if abs(P[i] - lo[i]) > tol:
                out.append(f"gen {i}: flagged at min but P = {P[i]!r}")
            if mc[i] < sol.lambda_star - tol:
                out.append(f"gen {i}: at min with marginal cost {mc[i]!r} < lambda {sol.lambda_star!r}")
        elif abs(mc[i] - sol.lambda_star) > tol:
            out.append(f"gen {i}: free with marginal cost {mc[i]!r} != lambda {sol.lambda_star!r}")
    return out


def _grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    k = int(math.floor((hi - lo) / step + 1e-9))
    ax = lo + step * np.arange(k + 1)
    if ax[-1] < hi - 1e-12:
        ax = np.append(ax, hi)
    return ax


def brute_force_optimum(params: Sequence[GeneratorParams], P_tot: float, grid: float | None = None,
                        final_grid: float = 1e-4) -> DispatchSolution:
    """Grid search over the feasible set, shrinking the grid 3x around the incumbent.

    The last generator absorbs the balance, so the search runs over N-1
    coordinates.  Intended for N <= 4.
    """
    _check_feasible(params, P_tot)
    n = len(params)
    if n > 4:
        raise ValueError("brute force is limited to N <= 4 generators")
    alpha, beta = coefficients(params)
    gamma = np.array([g.gamma for g in params])
    lo, hi = limits(params)
    # finite box: nobody can exceed the demand left after everyone else's minimum
    hi = np.minimum(hi, P_tot - (lo.sum() - lo))
    if n == 1:
        return _finish(params, np.array([P_tot]))
    span = float(np.max(hi[:-1] - lo[:-1]))
    step = grid if grid is not None else max(span / 40.0, final_grid)
    if step <= 0:
        raise ValueError("grid must be positive")
    box_lo, box_hi = lo[:-1].copy(), hi[:-1].copy()
    best = None
    while True:
        axes = [_grid_axis(a, b, step) for a, b in zip(box_lo, box_hi)]
        mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        last = P_tot - mesh.sum(axis=1)
        ok = (last >= lo[-1] - 1e-12) & (last <= hi[-1] + 1e-12)
        if ok.any():
            pts = np.column_stack([mesh[ok], last[ok]])
            c = (alpha * pts ** 2 + beta * pts + gamma).sum(axis=1)
            k = int(np.argmin(c))
            if best is None or c[k] <= best[0]:
                best = (float(c[k]), pts[k].copy())
        if best is None:
            # box too coarse to hit the balance slab; refine uniformly
            step /= 3.0
            continue
        if step < final_grid:
            break
        centre = best[1][:-1]
        box_lo = np.maximum(lo[:-1], centre - 3.0 * step)
        box_hi = np.minimum(hi[:-1], centre + 3.0 * step)
        step /= 3.0
    return _finish(params, best[1])


def _finish(params, P, tol=1e-6):
    alpha, beta = coefficients(params)
    lo, hi = limits(params)
    at_max = np.nonzero(np.abs(P - hi) <= tol)[0]
    at_min = np.nonzero(np.abs(P - lo) <= tol)[0]
    free = [i for i in range(len(params)) if i not in set(at_max) | set(at_min)]
    mc = 2.0 * alpha * P + beta
    lam = float(np.mean(mc[free])) if free else float(np.max(mc))
    return DispatchSolution(lam, P, set(at_max) | set(at_min), at_max)


def lambda_correction(params: Sequence[GeneratorParams], theta: dict[int, float] | Iterable[int],
                      lambda_tilde_value: float, P: Sequence[float] | None = None) -> float:
    """Shift an unconstrained incremental cost to account for pinned generators.

    ``theta`` maps saturated generator index to its fixed output; a plain set
    of indices may be given together with ``P``.
    """
    if not isinstance(theta, dict):
        if P is None:
            raise ValueError("P is required when theta is given as a set")
        theta = {int(i): float(P[i]) for i in theta}
    alpha, beta = coefficients(params)
    n = len(params)
    free = [i for i in range(n) if i not in theta]
    if not free:
        raise AllSaturated("every generator is saturated; no free set to absorb the correction")
    num = sum((lambda_tilde_value - 2.0 * alpha[i] * Pi - beta[i]) / (2.0 * alpha[i]) for i, Pi in theta.items())
    den = sum(1.0 / (2.0 * alpha[i]) for i in free)
    return lambda_tilde_value + num / den


def enumerate_active_sets(params: Sequence[GeneratorParams], P_tot: float) -> DispatchSolution:
    """Try every (free, min, max) labelling and keep the cheapest feasible one.

    3**N candidates; a second independent check for tiny N.
    """
    _check_feasible(params, P_tot)
    alpha, beta = coefficients(params)
    lo, hi = limits(params)
    n = len(params)
    best = None
    for labels in itertools.product((0, 1, 2), repeat=n):
        P = np.zeros(n)
        free = [i for i in range(n) if labels[i] == 0]
        for i in range(n):
            if labels[i] == 1:
                P[i] = lo[i]
            elif labels[i] == 2:
                if not math.isfinite(hi[i]):
                    break
                P[i] = hi[i]
        else:
            if free:
                w = 1.0 / (2.0 * alpha[free])
                lam = (P_tot - P.sum() + np.sum(beta[free] * w)) / np.sum(w)
                P[free] = (lam - beta[free]) / (2.0 * alpha[free])
            elif abs(P.sum() - P_tot) > 1e-9 * max(1.0, P_tot):
                continue
            if np.any(P < lo - 1e-9) or np.any(P > hi + 1e-9):
                continue
            c = total_cost(params, P)
            if best is None or c < best[0] - 1e-12:
                best = (c, P.copy())
    return _finish(params, best[1], tol=1e-9)
