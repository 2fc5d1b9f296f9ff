"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the ``acceptance``
section of the pytest terminal summary.
"""

import contextlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fxted.cli import main, read_trace_csv
from fxted.constrained import algorithm1
from fxted.discrete import FacaPlan, faca_consensus, z_step
from fxted.errors import AllSaturated
from fxted.graphnet import random_connected_topology
from fxted.oracle import brute_force_optimum, constrained_optimum, kkt_violations
from fxted.scenarios import random_scenario

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from algorithm1_equivalence import equivalence_scenario  # noqa: E402
from fixed_time_sweep import run_one  # noqa: E402


@contextlib.contextmanager
def criterion(k: int, what: str):
    """Record PASS/FAIL for criterion ``k``; failures still propagate."""
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        ACCEPTANCE_LINES.append(f"FAIL criterion {k}: {what} {_details(info)}")
        raise
    info.setdefault("runtime", f"{time.perf_counter() - t0:.1f}s")
    ACCEPTANCE_LINES.append(f"PASS criterion {k}: {what} {_details(info)}")


def _details(info: dict) -> str:
    return "(" + ", ".join(f"{k}={v}" for k, v in info.items()) + ")" if info else ""


# shared sweeps: criteria 2 and 4 also feed the balance check of criterion 3
_SWEEPS: dict = {}


def sweep(n_phases: int, noise: float = 0.0):
    key = (n_phases, noise)
    if key not in _SWEEPS:
        t0 = time.perf_counter()
        rows = [run_one(seed, n_phases, noise, layer="stable") for seed in range(100)]
        _SWEEPS[key] = (rows, time.perf_counter() - t0)
    return _SWEEPS[key]


def test_criterion_1_oracle_self_consistency():
    with criterion(1, "constrained optimum vs brute force, 500 instances N<=4") as info:
        t0 = time.perf_counter()
        worst_dev, worst_kkt = 0.0, []
        for seed in range(500):
            n = int(np.random.default_rng(seed).integers(1, 5))
            sc = random_scenario(n, 20_000 + seed, constrained=True)
            sol = constrained_optimum(sc.generators, sc.demand())
            brute = brute_force_optimum(sc.generators, sc.demand())
            worst_dev = max(worst_dev, float(np.abs(sol.P_star - brute.P_star).max()))
            worst_kkt += kkt_violations(sc.generators, sc.demand(), sol, tol=1e-9)
        runtime = time.perf_counter() - t0
        info.update(worst_dev=f"{worst_dev:.2e}", runtime=f"{runtime:.1f}s")
        assert worst_dev <= 1e-3
        assert worst_kkt == []
        assert runtime < 10


def _check_sweep(rows, tol_lambda=1e-3):
    misses = [r.seed for r in rows if not r.converged_in_time]
    lam_err = max(r.lambda_error for r in rows)
    assert misses == [], f"not converged by T1+T2: seeds {misses}"
    assert max(r.final_consensus for r in rows) <= 1e-3
    assert max(r.final_max_e for r in rows) <= 1e-3
    assert lam_err <= tol_lambda
    return lam_err


def test_criterion_2_fixed_time_convergence():
    with criterion(2, "100 static scenarios converge by T1+T2") as info:
        rows, runtime = sweep(1)
        info.update(converged=f"{sum(r.converged_in_time for r in rows)}/100",
                    max_tconv_over_bound=f"{max((r.t_conv or math.inf) / r.bound for r in rows):.3f}",
                    runtime=f"{runtime:.1f}s")
        info["lambda_err"] = f"{_check_sweep(rows):.1e}"
        assert runtime < 120


def test_criterion_3_load_balance():
    with criterion(3, "sum P = P_tot at every sample of the noise-free runs") as info:
        rows = sweep(1)[0] + sweep(5)[0]
        worst = max(r.max_balance for r in rows)
        info["worst_relative"] = f"{worst:.1e}"
        assert worst <= 1e-6


def test_criterion_4_switching():
    with criterion(4, "100 five-phase switching scenarios converge by T1+T2") as info:
        rows, runtime = sweep(5)
        info.update(converged=f"{sum(r.converged_in_time for r in rows)}/100", runtime=f"{runtime:.1f}s")
        info["lambda_err"] = f"{_check_sweep(rows):.1e}"


def test_criterion_5_noise():
    with criterion(5, "uniform noise 0.3: consensus error <= 1e-2 by T1+T2") as info:
        t0 = time.perf_counter()
        rows = [run_one(seed, 1, 0.3, layer="stable", tol=1e-2) for seed in range(100)]
        misses = [r.seed for r in rows if not r.converged_in_time]
        info.update(converged=f"{100 - len(misses)}/100", runtime=f"{time.perf_counter() - t0:.1f}s")
        assert misses == []


def test_criterion_6_faca_exact():
    with criterion(6, "finite-step averaging exact after K steps") as info:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(500):
            n = int(rng.integers(2, 9))
            plan = FacaPlan.from_topology(random_connected_topology(n, rng))
            x = rng.uniform(-100, 100, n)
            worst = max(worst, float(np.abs(faca_consensus(x, plan, steps=plan.K) - x.mean()).max()))
        info["worst"] = f"{worst:.1e}"
        assert worst <= 1e-9


def test_criterion_7_z_decay():
    with criterion(7, "|z(k)| <= 1/(k h) over 1000 (z0, h) pairs") as info:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            z = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-6, 6))
            h = float(10 ** rng.uniform(-3, 1))
            for k in range(1, 201):
                z = z_step(z, h)
                worst = max(worst, abs(z) * k * h)
                assert abs(z) <= 1.0 / (k * h)
        info["max_k_h_z"] = f"{worst:.6f}"


def _reproduce(capsys, tmp_path, name):
    code = main(["reproduce", name, "--out", str(tmp_path)])
    return code, json.loads(capsys.readouterr().out)


def test_criterion_8_iv_c(capsys, tmp_path):
    with criterion(8, "reproduce iv-c within 40 iterations") as info:
        code, d = _reproduce(capsys, tmp_path, "iv-c")
        info.update(iterations=d["iterations"], deviation=f"{d['max_deviation']:.1e}")
        assert code == 0
        assert d["iterations"] <= 40
        assert d["max_deviation"] <= 1e-3 * 250


def test_criterion_9_iv_b(capsys, tmp_path):
    with criterion(9, "reproduce iv-b re-enters 1e-2 within T1+T2 of each event") as info:
        code, d = _reproduce(capsys, tmp_path, "iv-b")
        rec = d["extra"]["event_recovery"]
        info["reentry_delays"] = [round(r["reentry"] - r["event"], 4) for r in rec if r["reentry"] is not None]
        # with p = 1485 the lambdas track each other closely; the load steps
        # show up mainly in the consistency error, so report the peak excursion
        cols, data = read_trace_csv(tmp_path / "iv-b_trace.csv")
        t, err = data[:, 0], data[:, cols.index("consensus_err")]
        info["peak_err_after_events"] = f"{err[t >= rec[0]['event']].max():.1e}"
        assert len(rec) == 4
        assert all(r["ok"] for r in rec)
        assert code == 0


def test_criterion_10_algorithm1_equivalence():
    with criterion(10, "pin-and-correct loop vs KKT oracle, 200 instances N<=6") as info:
        logging.disable(logging.WARNING)
        try:
            worst, over_rounds, audits = 0.0, [], []
            literal_bad, literal_unflagged = 0, []
            for seed in range(200):
                sc = equivalence_scenario(seed)
                res = algorithm1(sc)
                worst = max(worst, res.max_deviation)
                if len(res.rounds) > sc.n:
                    over_rounds.append(seed)
                if res.kkt_audit:
                    audits.append(seed)
                # the literal pin-every-violator rule, for information: every
                # mismatch it produces must be caught by the audit
                try:
                    lit = algorithm1(sc, fixing="literal")
                except AllSaturated:
                    literal_bad += 1
                    continue
                if lit.max_deviation > 1e-3:
                    literal_bad += 1
                    if not lit.kkt_audit:
                        literal_unflagged.append(seed)
        finally:
            logging.disable(logging.NOTSET)
        info.update(worst_dev=f"{worst:.1e}", literal_rule_mismatches=f"{literal_bad}/200")
        assert worst <= 1e-3
        assert over_rounds == [] and audits == []
        assert literal_unflagged == []
