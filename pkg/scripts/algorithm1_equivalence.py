"""Compare the pin-and-correct loop against the KKT oracle on random constrained instances.

    python3 scripts/algorithm1_equivalence.py [--seeds 200] [--fixing dominant|literal]
"""

import argparse
import logging
import time

import numpy as np

from fxted.constrained import algorithm1
from fxted.errors import AllSaturated
from fxted.scenarios import random_scenario


def equivalence_scenario(seed: int):
    n = int(np.random.default_rng(10_000 + seed).integers(1, 7))
    return random_scenario(n, 10_000 + seed, constrained=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--fixing", choices=("dominant", "literal"), default="dominant")
    args = ap.parse_args()
    logging.disable(logging.WARNING)
    t0 = time.time()
    worst, mismatches, max_rounds_excess, active = 0.0, [], 0, 0
    for s in range(args.seeds):
        sc = equivalence_scenario(s)
        try:
            res = algorithm1(sc, fixing=args.fixing)
        except AllSaturated as exc:
            mismatches.append((s, sc.n, float("nan"), str(exc)))
            continue
        worst = max(worst, res.max_deviation)
        active += bool(res.oracle.saturated)
        max_rounds_excess = max(max_rounds_excess, len(res.rounds) - sc.n)
        if res.kkt_audit:
            mismatches.append((s, sc.n, res.max_deviation, res.kkt_audit[0]))
    print(f"fixing={args.fixing}: {len(mismatches)} audit failures / {args.seeds}, "
          f"worst deviation {worst:.3e} MW, limits active in {active}, "
          f"max(rounds - N) = {max_rounds_excess} ({time.time() - t0:.1f}s)")
    for m in mismatches:
        print("  ", m)


if __name__ == "__main__":
    main()
