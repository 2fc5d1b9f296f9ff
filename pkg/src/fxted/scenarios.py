"""Experiment configurations: the three case-study setups and a random generator.

A ``Scenario`` bundles everything one run needs.  It serialises to a flat
JSON object::

    {"name", "case", "topology_schedule", "gains", "noise", "loads",
     "assignment", "t_end", "dt", "seed", "mode", ...}

``case`` is either the name/path of a case file or an inline object with a
``generators`` list.  ``loads`` and ``assignment`` fall back to the case file's
own when omitted.  Optional keys: ``lambda0``, ``P0``, ``initial_conditions``,
``h``, ``tol``, ``max_iters``, ``notes``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fxted.dynamics import Gains, NoiseModel, disturbance_bound, settling_bounds
from fxted.errors import ParseError, ValidationError
from fxted.graphnet import TopologySchedule, random_connected_topology, random_schedule, ring_graph
from fxted.model import (Assignment, GeneratorParams, LoadSchedule, case_from_dict, check_feasible,
                         initial_dispatch, load_case, resolve_case_path, total_demand)

MODES = ("unconstrained", "constrained", "discrete")

SWITCH_INTERVAL_57 = 0.0025
GAIN_57 = 1485.0
DEMAND_IVB = 141.13
EVENTS_IVB = (0.66, 1.1, 1.31, 1.75)
LEVELS_IVB = (69.83, 212.81, 69.83, 212.81)
DEMAND_IVC = 250.0


@dataclass(frozen=True)
class Scenario:
    name: str
    generators: tuple[GeneratorParams, ...]
    topology_schedule: TopologySchedule
    gains: Gains
    loads: LoadSchedule
    assignment: Assignment
    mode: str = "unconstrained"
    noise: NoiseModel = field(default_factory=NoiseModel)
    t_end: float = 10.0
    seed: int = 0
    case: str = ""
    lambda0: tuple[float, ...] | None = None
    P0: tuple[float, ...] | None = None
    initial_conditions: tuple[tuple[float, ...], ...] = ()
    h: float = 0.1
    tol: float = 1e-3
    max_iters: int | None = None
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        for name in ("lambda0", "P0"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(x) for x in v))
        object.__setattr__(self, "initial_conditions",
                           tuple(tuple(float(x) for x in ic) for ic in self.initial_conditions))
        self.validate()

    @property
    def n(self) -> int:
        return len(self.generators)

    @property
    def dt(self) -> float:
        return self.gains.dt

    def validate(self) -> None:
        n = self.n
        if n == 0:
            raise ValidationError("scenario has no generators")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.topology_schedule.n != n:
            raise ValidationError(f"topology has {self.topology_schedule.n} nodes for {n} generators")
        if self.assignment.n_generators != n or len(self.assignment.assign) != self.loads.m:
            raise ValidationError("assignment does not match generators/loads")
        for name, v in (("lambda0", self.lambda0), ("P0", self.P0)):
            if v is not None and len(v) != n:
                raise ValidationError(f"{name} has {len(v)} entries for {n} generators")
        for ic in self.initial_conditions:
            if len(ic) != n:
                raise ValidationError("initial condition length does not match generator count")
        if not self.t_end > 0:
            raise ValidationError("t_end must be > 0")
        if not (self.h > 0 and self.tol > 0):
            raise ValidationError("h and tol must be > 0")
        if self.mode == "discrete" and not self.topology_schedule.is_static:
            raise ValidationError("discrete mode needs a static topology")
        if self.mode != "unconstrained":
            check_feasible(self.generators, self.loads)

    def initial_P(self, variant: int | None = None) -> np.ndarray:
        """``P(0)``: a listed initial condition, the explicit ``P0``, or the assigned loads."""
        if variant is not None:
            return np.array(self.initial_conditions[variant])
        if self.P0 is not None:
            return np.array(self.P0)
        return initial_dispatch(self.loads, self.assignment)

    def demand(self, t: float = 0.0) -> float:
        return total_demand(self.loads, t)

    def with_overrides(self, **kw) -> "Scenario":
        """Copy with fields replaced; ``dt``, ``p`` and ``smoothing_eps`` go into the gains."""
        gain_keys = {k: kw.pop(k) for k in ("dt", "p", "smoothing_eps") if kw.get(k) is not None}
        kw = {k: v for k, v in kw.items() if v is not None}
        if "seed" in kw and self.noise.active:
            kw.setdefault("noise", replace(self.noise, seed=int(kw["seed"])))
        if gain_keys:
            kw["gains"] = replace(self.gains, **gain_keys)
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {"name": self.name,
             "case": self.case if self.case else {"generators": [g.to_dict() for g in self.generators]},
             "mode": self.mode,
             "topology_schedule": self.topology_schedule.to_dict(),
             "gains": self.gains.to_dict(),
             "noise": self.noise.to_dict(),
             "loads": self.loads.to_dict(),
             "assignment": list(self.assignment.assign),
             "t_end": self.t_end, "dt": self.dt, "seed": self.seed,
             "h": self.h, "tol": self.tol}
        if self.max_iters is not None:
            d["max_iters"] = self.max_iters
        if self.lambda0 is not None:
            d["lambda0"] = list(self.lambda0)
        if self.P0 is not None:
            d["P0"] = list(self.P0)
        if self.initial_conditions:
            d["initial_conditions"] = [list(ic) for ic in self.initial_conditions]
        if self.notes:
            d["notes"] = self.notes
        return d


def _get(d: dict, key: str, where: str):
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    return d[key]


def scenario_from_dict(d: dict, base: Path | None = None, where: str = "scenario") -> Scenario:
    if not isinstance(d, dict):
        raise ParseError(f"{where}: top level must be an object")
    ref = _get(d, "case", where)
    if isinstance(ref, dict):
        case = case_from_dict(ref, where=f"{where}: case")
        case_name = ""
    elif isinstance(ref, str):
        case = load_case(resolve_case_path(ref, base))
        case_name = ref
    else:
        raise ParseError(f"{where}: 'case' must be a path or an object")
    gens = case.generators
    loads = LoadSchedule.from_dict(d["loads"]) if "loads" in d else case.loads
    if d.get("assignment") is not None:
        assignment = Assignment(tuple(d["assignment"]), len(gens))
    elif "loads" in d:
        assignment = Assignment.default(loads.m, len(gens))
    else:
        assignment = case.assignment
    gains_d = dict(d.get("gains", {}))
    if "dt" in d:
        gains_d["dt"] = d["dt"]
    try:
        schedule = TopologySchedule.from_dict(_get(d, "topology_schedule", where))
        max_iters = d.get("max_iters")
        return Scenario(
            name=str(d.get("name", "")), generators=tuple(gens), topology_schedule=schedule,
            gains=Gains.from_dict(gains_d), loads=loads, assignment=assignment,
            mode=str(d.get("mode", "unconstrained")), noise=NoiseModel.from_dict(d.get("noise")),
            t_end=float(d.get("t_end", 10.0)), seed=int(d.get("seed", 0)), case=case_name,
            lambda0=d.get("lambda0"), P0=d.get("P0"),
            initial_conditions=tuple(d.get("initial_conditions", ())),
            h=float(d.get("h", 0.1)), tol=float(d.get("tol", 1e-3)),
            max_iters=None if max_iters is None else int(max_iters), notes=str(d.get("notes", "")))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario {str(path)!r}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(data, base=path.parent, where=str(path))


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


# --- loads -----------------------------------------------------------------

def split_demand(total: float, n_loads: int, rng: np.random.Generator) -> tuple[float, ...]:
    """``n_loads`` positive demands summing to ``total`` (up to rounding)."""
    w = rng.uniform(0.5, 1.5, size=n_loads)
    return tuple(float(x) for x in total * w / w.sum())


def scaled_events(base: Sequence[float], times: Sequence[float], levels: Sequence[float]):
    """Events that rescale every load proportionally so the total hits each level."""
    s = float(sum(base))
    return tuple((float(t), tuple(x * lvl / s for x in base)) for t, lvl in zip(times, levels))


def random_initial_dispatch(total: float, n: int, rng: np.random.Generator, count: int):
    """``count`` random nonnegative vectors with entries summing to ``total``."""
    out = []
    for _ in range(count):
        P = total * rng.dirichlet(np.ones(n))
        P[-1] = total - P[:-1].sum()
        out.append(tuple(float(x) for x in P))
    return tuple(out)


# --- canned case studies -----------------------------------------------------

def _case57():
    return load_case("case57")


def scenario_switching_57(seed: int = 57, demand: float = DEMAND_IVB, t_end: float = 0.25,
                          n_initial: int = 4) -> Scenario:
    """7-generator constrained dispatch over randomly switching connected graphs.

    The graph changes every 2.5 ms; ``initial_conditions`` holds ``n_initial``
    seeded power vectors that all meet the demand.
    """
    case = _case57()
    gens = case.generators
    n = len(gens)
    rng = np.random.default_rng(seed)
    n_phases = int(math.ceil(t_end / SWITCH_INTERVAL_57))
    schedule = random_schedule(n, rng, n_phases, SWITCH_INTERVAL_57)
    loads = LoadSchedule(split_demand(demand, 2 * n, rng))
    return Scenario(
        name="iv-a", case="case57", generators=tuple(gens), topology_schedule=schedule,
        gains=Gains(p=GAIN_57, mu1=0.8, mu2=1.2, nu1=0.8, nu2=1.2, dt=1e-6),
        loads=loads, assignment=Assignment.default(loads.m, n), mode="constrained",
        t_end=t_end, seed=seed,
        initial_conditions=random_initial_dispatch(total_demand(loads, 0.0), n, rng, n_initial),
        notes="demand level is an interpretation; the switching case does not state one")


def scenario_timevarying_noise_57(seed: int = 571, t_end: float = 6.0) -> Scenario:
    """Step changes in demand under truncated-Gaussian noise (sigma 0.1), static graph."""
    case = _case57()
    gens = case.generators
    n = len(gens)
    rng = np.random.default_rng(seed)
    topo = random_connected_topology(n, rng)
    base = split_demand(DEMAND_IVB, 2 * n, rng)
    loads = LoadSchedule(base, scaled_events(base, EVENTS_IVB, LEVELS_IVB))
    schedule = TopologySchedule.static(topo)
    gains = Gains(p=GAIN_57, dt=1e-6)
    return Scenario(
        name="iv-b", case="case57", generators=tuple(gens), topology_schedule=schedule,
        gains=gains, loads=loads, assignment=Assignment.default(loads.m, n), mode="unconstrained",
        noise=NoiseModel("truncated_gaussian", sigma=0.1, seed=seed), t_end=t_end, seed=seed,
        notes="alternation order 141.13 -> 69.83 -> 212.81 -> 69.83 -> 212.81 is an interpretation")


def scenario_comparison_30(h: float = 0.1, tol: float = 1e-3) -> Scenario:
    """Discrete iteration on the 6-generator case with loads scaled to 250 MW, ring graph."""
    case = load_case("case30")
    gens = case.generators
    s = sum(case.loads.loads)
    loads = LoadSchedule(tuple(x * DEMAND_IVC / s for x in case.loads.loads))
    return Scenario(
        name="iv-c", case="case30", generators=tuple(gens),
        topology_schedule=TopologySchedule.static(ring_graph(len(gens))),
        gains=Gains(), loads=loads, assignment=case.assignment, mode="discrete",
        t_end=1.0, h=h, tol=tol, max_iters=1000)


CANNED = {"iv-a": scenario_switching_57, "iv-b": scenario_timevarying_noise_57, "iv-c": scenario_comparison_30}


# --- random scenarios ----------------------------------------------------------

def random_scenario(n: int, seed: int, constrained: bool = False, noise_bound: float = 0.0,
                    n_phases: int = 1, interval: float = 1.0, dt: float = 1e-4) -> Scenario:
    """Seeded random instance for property tests.

    Costs: alpha in [0.1, 2], beta in [0, 10], gamma in [0, 5]; one load per
    generator with demand in [1, 20].  With ``constrained`` each generator gets
    limits around its fair share (p_min up to 0.6x, p_max 1-2x), which keeps
    the demand feasible.  ``n_phases > 1`` switches among random connected
    graphs every ``interval`` seconds.  The gain p is the larger of 1 and the
    minimum gain for the noise level; ``t_end`` is the settling bound.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.1, 2.0, n)
    beta = rng.uniform(0.0, 10.0, n)
    gamma = rng.uniform(0.0, 5.0, n)
    demands = tuple(float(x) for x in rng.uniform(1.0, 20.0, n))
    P_tot = float(sum(demands))
    share = P_tot / n
    if constrained:
        p_min = rng.uniform(0.0, 0.6, n) * share
        p_max = rng.uniform(1.0, 2.0, n) * share
    else:
        p_min, p_max = np.zeros(n), np.full(n, math.inf)
    gens = tuple(GeneratorParams(float(alpha[i]), float(beta[i]), float(gamma[i]), float(p_min[i]),
                                 float(p_max[i]), f"g{i}") for i in range(n))
    if n_phases > 1:
        schedule = random_schedule(n, rng, n_phases, interval)
    else:
        schedule = TopologySchedule.static(random_connected_topology(n, rng))
    lam0 = tuple(float(x) for x in rng.uniform(-100.0, 100.0, n))
    noise = NoiseModel("uniform", bound=noise_bound, seed=seed) if noise_bound > 0 else NoiseModel()
    gains = Gains(dt=dt)
    Delta = disturbance_bound(noise, gens)
    p = max(1.0, settling_bounds(gens, schedule, gains, Delta).p_min_gain)
    gains = replace(gains, p=p)
    bound = settling_bounds(gens, schedule, gains, Delta).total
    loads = LoadSchedule(demands)
    return Scenario(
        name=f"random-n{n}-s{seed}", generators=gens, topology_schedule=schedule, gains=gains,
        loads=loads, assignment=Assignment.default(n, n),
        mode="constrained" if constrained else "unconstrained", noise=noise, t_end=bound, seed=seed,
        lambda0=lam0)
