"""Command-line entry point.

    fxted simulate     SCENARIO.json   continuous dynamics, limits ignored
    fxted constrained  SCENARIO.json   pin-and-correct dispatch with limits
    fxted discrete     SCENARIO.json   discrete-time iteration
    fxted oracle       CASE.json --demand X
    fxted bounds       SCENARIO.json   settling-time bounds and gain condition
    fxted reproduce    iv-a | iv-b | iv-c

A JSON run summary goes to stdout.  Traces are written only when an output
directory is given (``--out`` or ``$FXT_OUT_DIR``).  Exit status: 0 when every
check passes, 2 on a convergence failure, 1 on bad input.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fxted.constrained import algorithm1
from fxted.discrete import discrete_solve
from fxted.dynamics import disturbance_bound, settling_bounds, simulate, stable_smoothing_eps
from fxted.errors import AllSaturated, FxtError, MaxIterations, NotConverged
from fxted.graphnet import lambda2_star, lambda_max_star
from fxted.model import load_case, total_demand
from fxted.oracle import constrained_optimum, unconstrained_optimum
from fxted.scenarios import CANNED, Scenario, load_scenario

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2
SIG = 12


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; that code means "did not converge" here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- output ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.{SIG}g}"


def _round(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_round(v) for v in x]
    x = float(x)
    return x if not math.isfinite(x) else float(_fmt(x))


def write_trace(trace, fmt: str, path: str | Path) -> Path:
    """Write ``trace.columns()`` / ``trace.rows()`` as CSV or column-keyed JSON."""
    path = Path(path)
    cols = trace.columns()
    rows = np.asarray(trace.rows(), dtype=float).reshape(-1, len(cols))
    if fmt == "csv":
        with path.open("w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")
    elif fmt == "json":
        path.write_text(json.dumps({c: _round(rows[:, j]) for j, c in enumerate(cols)}) + "\n")
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return path


def read_trace_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        cols = fh.readline().strip().split(",")
        body = fh.read()
    if not body.strip():
        return cols, np.zeros((0, len(cols)))
    data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    return cols, data.reshape(-1, len(cols))


@dataclass
class RunSummary:
    scenario: str
    mode: str
    oracle_lambda: float
    oracle_P: list[float]
    lambda_: float
    P: list[float]
    max_deviation: float
    tol: float
    converged: bool
    convergence_time: float | None = None
    iterations: int | None = None
    bound: float | None = None
    within_bound: bool = True
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.converged and self.within_bound and self.max_deviation <= self.tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        for k in ("oracle_lambda", "oracle_P", "lambda", "P", "max_deviation", "convergence_time", "bound"):
            d[k] = _round(d[k])
        for k in ("converged", "within_bound"):
            d[k] = bool(d[k])
        d["passed"] = bool(self.passed)
        return d


def summary_schema() -> dict:
    from importlib import resources
    return json.loads((resources.files("fxted") / "data" / "run_summary.schema.json").read_text())


# --- runners -------------------------------------------------------------------

def _entry_time(trace, t_from: float, tol: float) -> float | None:
    """First sample at or after ``t_from`` with consensus and consistency both within ``tol``."""
    ok = (trace.t >= t_from) & (trace.consensus_err <= tol) & (trace.max_e <= tol)
    idx = np.nonzero(ok)[0]
    return None if idx.size == 0 else float(trace.t[idx[0]])


def run_simulate(sc: Scenario, tol: float, hold: float | None = None):
    Delta = disturbance_bound(sc.noise, sc.generators)
    bound = settling_bounds(sc.generators, sc.topology_schedule, sc.gains, Delta).total
    trace = simulate(sc, tol=tol, hold=hold)
    last_event = trace.event_times[-1] if trace.event_times else 0.0
    t_conv = _entry_time(trace, last_event, tol)
    oracle = unconstrained_optimum(sc.generators, float(trace.P_tot[-1]))
    lam = trace.lam[-1]
    dev = float(np.max(np.abs(lam - oracle.lambda_star)))
    s = RunSummary(sc.name, "unconstrained", oracle.lambda_star, list(oracle.P_star), float(lam.mean()),
                   list(trace.P[-1]), dev, tol, t_conv is not None, convergence_time=t_conv, bound=bound,
                   within_bound=t_conv is not None and t_conv - last_event <= bound, seed=sc.seed,
                   extra={"event_times": trace.event_times,
                          "max_balance_residual": _round(float(trace.balance_residual.max()))})
    return s, trace, None


def run_constrained(sc: Scenario, tol: float, P0=None, fixing: str = "dominant"):
    bound = settling_bounds(sc.generators, sc.topology_schedule, sc.gains).total
    res = algorithm1(sc, fixing=fixing, P0=P0, audit_tol=tol)
    t_conv = res.trace.first_convergence_time
    s = RunSummary(sc.name, "constrained", res.oracle.lambda_star, list(res.oracle.P_star),
                   res.solution.lambda_star, list(res.solution.P_star), res.max_deviation, tol,
                   t_conv is not None and not res.kkt_audit, convergence_time=t_conv,
                   iterations=len(res.rounds), bound=bound,
                   within_bound=t_conv is not None and t_conv <= bound, seed=sc.seed,
                   extra={"rounds": [r.to_dict() for r in res.rounds], "kkt_audit": res.kkt_audit,
                          "lambda_tilde": _round(res.lambda_tilde), "saturated": sorted(res.solution.saturated)})
    return s, res.trace, res


def run_discrete(sc: Scenario, tol: float, h=None, max_iters=None, weighting="cost"):
    res = discrete_solve(sc, h=h, tol=tol, max_iters=max_iters, weighting=weighting)
    P_tot = total_demand(sc.loads, 0.0)
    # the stopping rule is on lambda spread and z; deviation is judged relative to demand
    s = RunSummary(sc.name, "discrete", res.oracle.lambda_star, list(res.oracle.P_star),
                   res.solution.lambda_star, list(res.solution.P_star), res.max_deviation, tol * max(1.0, P_tot),
                   True, iterations=res.iterations, seed=sc.seed,
                   extra={"h": h if h is not None else sc.h, "weighting": weighting, "K": res.plan.K})
    return s, res.trace, res


def _event_recovery(trace, bound: float, tol: float = 1e-2) -> list[dict]:
    out = []
    for te in trace.event_times:
        m = trace.t >= te
        idx = np.nonzero(m & (trace.consensus_err <= tol))[0]
        t_in = None if idx.size == 0 else float(trace.t[idx[0]])
        out.append({"event": _round(te), "reentry": _round(t_in),
                    "ok": t_in is not None and t_in - te <= bound})
    return out


def _emit(out: Path | None, stem: str, summary: RunSummary, trace, fmt: str, extra_files=None):
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    if trace is not None:
        write_trace(trace, fmt, out / f"{stem}_trace.{fmt}")
    (out / f"{stem}_summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    for name, obj in (extra_files or {}).items():
        (out / name).write_text(json.dumps(obj, indent=2) + "\n")


def _run_one(kind: str, sc: Scenario, args) -> RunSummary:
    tol = args.tol
    if kind == "simulate":
        s, trace, _ = run_simulate(sc, tol if tol is not None else 1e-3)
    elif kind == "constrained":
        s, trace, _ = run_constrained(sc, tol if tol is not None else 1e-3)
    else:
        s, trace, _ = run_discrete(sc, tol if tol is not None else sc.tol, h=args.h, max_iters=args.max_iters,
                                   weighting=args.weighting)
    stem = f"{sc.name or kind}_seed{sc.seed}" if getattr(args, "trials", 1) > 1 else (sc.name or kind)
    files = {f"{stem}_rounds.json": s.extra["rounds"]} if kind == "constrained" else None
    _emit(args.out, stem, s, trace, args.format, files)
    return s


def _trial_worker(payload):
    kind, sc, args = payload
    try:
        return _run_one(kind, sc, args)
    except (NotConverged, MaxIterations, AllSaturated) as exc:
        return exc


def _scenario_from_args(args) -> Scenario:
    sc = load_scenario(args.scenario)
    return sc.with_overrides(dt=args.dt, seed=args.seed)


def cmd_run(kind: str, args) -> int:
    sc = _scenario_from_args(args)
    if args.trials > 1:
        base = sc.seed if args.seed is None else args.seed
        jobs = [(kind, sc.with_overrides(seed=base + i), args) for i in range(args.trials)]
        with ProcessPoolExecutor(max_workers=min(args.trials, os.cpu_count() or 1)) as ex:
            results = list(ex.map(_trial_worker, jobs))  # map keeps seed order
        failed = [r for r in results if isinstance(r, Exception)]
        summaries = [r.to_dict() if isinstance(r, RunSummary) else {"error": str(r)} for r in results]
        passed = not failed and all(r.passed for r in results)
        print(json.dumps({"trials": summaries, "passed": passed}, indent=2))
        return EXIT_OK if passed else EXIT_CONVERGENCE
    s = _run_one(kind, sc, args)
    print(json.dumps(s.to_dict(), indent=2))
    return EXIT_OK if s.passed else EXIT_CONVERGENCE


def cmd_oracle(args) -> int:
    case = load_case(args.case)
    demand = args.demand if args.demand is not None else sum(case.loads.loads)
    solve = unconstrained_optimum if args.unconstrained else constrained_optimum
    sol = solve(case.generators, demand)
    print(json.dumps(sol.to_dict(case.generators), indent=2))
    return EXIT_OK


def cmd_bounds(args) -> int:
    sc = _scenario_from_args(args)
    gains = sc.gains
    Delta = disturbance_bound(sc.noise, sc.generators)
    b = settling_bounds(sc.generators, sc.topology_schedule, gains, Delta)
    d = {k: _round(v) for k, v in b.to_dict().items()}
    d.update({"lambda2_star": _round(lambda2_star(sc.topology_schedule)),
              "lambda_max_star": _round(lambda_max_star(sc.topology_schedule)),
              "p": gains.p, "gain_condition_met": bool(gains.p >= b.p_min_gain),
              "stable_smoothing_eps": _round(stable_smoothing_eps(sc.generators, sc.topology_schedule, gains))})
    print(json.dumps(d, indent=2))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    ctor = CANNED[args.experiment]
    sc = ctor() if args.seed is None or args.experiment == "iv-c" else ctor(seed=args.seed)
    sc = sc.with_overrides(dt=args.dt)
    out, fmt = args.out, args.format
    if args.experiment == "iv-a":
        tol = args.tol if args.tol is not None else 1e-3
        runs, passed = [], True
        for v in range(len(sc.initial_conditions)):
            s, trace, _ = run_constrained(sc, tol, P0=sc.initial_P(v))
            s.extra["initial_condition"] = v
            _emit(out, f"iv-a_ic{v}", s, trace, fmt)
            runs.append(s.to_dict())
            passed &= s.passed
        print(json.dumps({"scenario": "iv-a", "runs": runs, "passed": passed}, indent=2))
        return EXIT_OK if passed else EXIT_CONVERGENCE
    if args.experiment == "iv-b":
        tol = args.tol if args.tol is not None else 1e-2
        s, trace, _ = run_simulate(sc, tol)
        rec = _event_recovery(trace, s.bound, tol)
        s.extra["event_recovery"] = rec
        s.within_bound = s.within_bound and all(r["ok"] for r in rec)
        _emit(out, "iv-b", s, trace, fmt)
        print(json.dumps(s.to_dict(), indent=2))
        return EXIT_OK if s.passed else EXIT_CONVERGENCE
    tol = args.tol if args.tol is not None else sc.tol
    s, trace, _ = run_discrete(sc, tol, h=args.h, max_iters=args.max_iters)
    _emit(out, "iv-c", s, trace, fmt)
    print(json.dumps(s.to_dict(), indent=2))
    return EXIT_OK if s.passed else EXIT_CONVERGENCE


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, default=None, help="output directory (default: $FXT_OUT_DIR)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--dt", type=float, default=None)
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--trials", type=int, default=1)

    p = _Parser(prog="fxted", description="Fixed-time distributed economic dispatch simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("simulate", "constrained", "discrete", "bounds"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("scenario", type=Path)
        if name == "discrete":
            sp.add_argument("--h", type=float, default=None)
            sp.add_argument("--max-iters", type=int, default=None)
            sp.add_argument("--weighting", choices=("cost", "laplacian"), default="cost")
    sp = sub.add_parser("oracle", parents=[common])
    sp.add_argument("case")
    sp.add_argument("--demand", type=float, default=None)
    sp.add_argument("--unconstrained", action="store_true")
    sp = sub.add_parser("reproduce", parents=[common])
    sp.add_argument("experiment", choices=sorted(CANNED))
    sp.add_argument("--h", type=float, default=None)
    sp.add_argument("--max-iters", type=int, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.out is None and os.environ.get("FXT_OUT_DIR"):
            args.out = Path(os.environ["FXT_OUT_DIR"])
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        if args.command in ("simulate", "constrained", "discrete"):
            return cmd_run(args.command, args)
        if args.command == "oracle":
            return cmd_oracle(args)
        if args.command == "bounds":
            return cmd_bounds(args)
        return cmd_reproduce(args)
    except (NotConverged, MaxIterations, AllSaturated) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (UsageError, FxtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
