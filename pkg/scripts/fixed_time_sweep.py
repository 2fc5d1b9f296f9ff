"""Fixed-time convergence sweep over seeded random scenarios.

For each seed: build a random connected scenario (N <= 8, lambda(0) in
[-100, 100]), integrate to the settling bound T1+T2, and record when the
consensus and consistency errors first drop below ``tol`` together, plus the
final distance to the closed-form optimum.

    python3 scripts/fixed_time_sweep.py [--seeds 100] [--phases 1] [--noise 0] [--layer stable|none]
"""

import argparse
import time
from dataclasses import dataclass, replace

import numpy as np

from fxted.dynamics import disturbance_bound, settling_bounds, simulate, stable_smoothing_eps
from fxted.oracle import unconstrained_optimum
from fxted.scenarios import random_scenario


@dataclass
class SweepRow:
    seed: int
    n: int
    bound: float
    t_conv: float | None
    final_consensus: float
    final_max_e: float
    lambda_error: float
    max_balance: float  # max |sum P - P_tot| / P_tot over the samples

    @property
    def converged_in_time(self) -> bool:
        return self.t_conv is not None and self.t_conv <= self.bound


def sweep_scenario(seed: int, n_phases: int = 1, noise_bound: float = 0.0):
    n = int(np.random.default_rng(seed).integers(1, 9))
    return random_scenario(n, seed, n_phases=n_phases, interval=1.0, noise_bound=noise_bound)


def run_one(seed: int, n_phases: int = 1, noise_bound: float = 0.0, layer: str = "stable",
            tol: float = 1e-3) -> SweepRow:
    sc = sweep_scenario(seed, n_phases, noise_bound)
    gains = sc.gains
    if layer == "stable":
        gains = replace(gains, smoothing_eps=stable_smoothing_eps(sc.generators, sc.topology_schedule, gains))
    Delta = disturbance_bound(sc.noise, sc.generators)
    bound = settling_bounds(sc.generators, sc.topology_schedule, gains, Delta).total
    tr = simulate(sc, gains=gains, t_end=bound, tol=tol, sample_stride=1000)
    lam_star = unconstrained_optimum(sc.generators, sc.demand()).lambda_star
    return SweepRow(seed, sc.n, bound, tr.first_convergence_time, float(tr.consensus_err[-1]),
                    float(tr.max_e[-1]), float(np.abs(tr.lam[-1] - lam_star).max()),
                    float(tr.balance_residual.max() / sc.demand()))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--phases", type=int, default=1)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--layer", choices=("stable", "none"), default="stable")
    ap.add_argument("--tol", type=float, default=1e-3)
    args = ap.parse_args()
    t0 = time.time()
    rows = [run_one(s, args.phases, args.noise, args.layer, args.tol) for s in range(args.seeds)]
    ok = sum(r.converged_in_time for r in rows)
    print(f"{ok}/{len(rows)} converged by T1+T2 ({time.time() - t0:.1f}s)")
    print(f"max final consensus error {max(r.final_consensus for r in rows):.3e}")
    print(f"max final |e|             {max(r.final_max_e for r in rows):.3e}")
    print(f"max final |lambda-lambda*| {max(r.lambda_error for r in rows):.3e}")
    print(f"max balance / P_tot       {max(r.max_balance for r in rows):.3e}")
    print(f"max t_conv/bound          {max((r.t_conv or np.inf) / r.bound for r in rows):.3f}")
    for r in rows:
        if not r.converged_in_time:
            print("  miss:", r)


if __name__ == "__main__":
    main()
