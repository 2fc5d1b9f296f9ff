"""Generators, loads and the load-to-generator assignment.

Case files are JSON.  Two are shipped in ``fxted/data``: ``case30`` and
``case57``, whose generator limits and quadratic cost rows come from the
MATPOWER cases of the same name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from fxted.errors import Infeasible, ParseError, ValidationError


@dataclass(frozen=True)
class GeneratorParams:
    """Quadratic cost ``alpha*P**2 + beta*P + gamma`` with limits ``[p_min, p_max]``."""

    alpha: float
    beta: float
    gamma: float = 0.0
    p_min: float = 0.0
    p_max: float = math.inf
    name: str = ""

    def __post_init__(self):
        # beta/gamma may be 0: the shipped MATPOWER rows carry c0 = 0
        if not self.alpha > 0:
            raise ValidationError(f"generator {self.name or '?'}: alpha must be > 0 (got {self.alpha})")
        if self.beta < 0:
            raise ValidationError(f"generator {self.name or '?'}: beta must be >= 0 (got {self.beta})")
        if self.gamma < 0:
            raise ValidationError(f"generator {self.name or '?'}: gamma must be >= 0 (got {self.gamma})")
        if self.p_min < 0:
            raise ValidationError(f"generator {self.name or '?'}: p_min must be >= 0 (got {self.p_min})")
        if not self.p_min < self.p_max:
            raise ValidationError(
                f"generator {self.name or '?'}: p_min < p_max violated ({self.p_min} >= {self.p_max})")

    def marginal_cost(self, P):
        return 2.0 * self.alpha * P + self.beta

    def to_dict(self) -> dict:
        d = {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
             "p_min": self.p_min, "p_max": None if math.isinf(self.p_max) else self.p_max}
        if self.name:
            d["name"] = self.name
        return d


def cost(params: GeneratorParams, P: float) -> float:
    return params.alpha * P * P + params.beta * P + params.gamma


def total_cost(params: Sequence[GeneratorParams], P) -> float:
    return float(sum(cost(g, float(p)) for g, p in zip(params, P)))


def coefficients(params: Sequence[GeneratorParams]) -> tuple[np.ndarray, np.ndarray]:
    """``(alpha, beta)`` as float arrays."""
    return (np.array([g.alpha for g in params], dtype=float),
            np.array([g.beta for g in params], dtype=float))


def limits(params: Sequence[GeneratorParams]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([g.p_min for g in params], dtype=float),
            np.array([g.p_max for g in params], dtype=float))


def unconstrained(params: Sequence[GeneratorParams]) -> list[GeneratorParams]:
    """Same costs with limits dropped (p_min = 0, p_max = inf)."""
    return [GeneratorParams(g.alpha, g.beta, g.gamma, 0.0, math.inf, g.name) for g in params]


@dataclass(frozen=True)
class LoadSchedule:
    """Base demands plus right-continuous step events ``(time, new_demands)``."""

    loads: tuple[float, ...]
    events: tuple[tuple[float, tuple[float, ...]], ...] = ()

    def __post_init__(self):
        loads = tuple(float(x) for x in self.loads)
        events = tuple((float(t), tuple(float(x) for x in d)) for t, d in self.events)
        object.__setattr__(self, "loads", loads)
        object.__setattr__(self, "events", events)
        if any(x < 0 for x in loads):
            raise ValidationError("load demands must be >= 0")
        times = [t for t, _ in events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("load event times must be strictly increasing")
        for t, d in events:
            if t < 0:
                raise ValidationError(f"load event at negative time {t}")
            if len(d) != len(loads):
                raise ValidationError(f"event at t={t} has {len(d)} demands, expected {len(loads)}")
            if any(x < 0 for x in d):
                raise ValidationError(f"event at t={t} has a negative demand")

    @property
    def m(self) -> int:
        return len(self.loads)

    def demands_at(self, t: float) -> tuple[float, ...]:
        current = self.loads
        for te, d in self.events:
            if te <= t:
                current = d
            else:
                break
        return current

    def to_dict(self) -> dict:
        return {"loads": list(self.loads),
                "events": [{"t": t, "demands": list(d)} for t, d in self.events]}

    @classmethod
    def from_dict(cls, d) -> "LoadSchedule":
        if isinstance(d, list):
            return cls(tuple(d))
        try:
            loads = d["loads"]
        except KeyError:
            raise ParseError("load schedule missing field 'loads'") from None
        try:
            events = [(e["t"], e["demands"]) for e in d.get("events", [])]
        except KeyError as exc:
            raise ParseError(f"load event missing field {exc.args[0]!r}") from None
        return cls(tuple(loads), tuple(events))


def _sum_ordered(values) -> float:
    # fixed left-to-right order so totals are reproducible bit for bit
    s = 0.0
    for v in values:
        s += v
    return s


def total_demand(loads: LoadSchedule, t: float) -> float:
    return _sum_ordered(loads.demands_at(t))


@dataclass(frozen=True)
class Assignment:
    """``assign[k]`` is the single generator that load ``k`` reports to."""

    assign: tuple[int, ...]
    n_generators: int

    def __post_init__(self):
        assign = tuple(int(i) for i in self.assign)
        object.__setattr__(self, "assign", assign)
        for k, i in enumerate(assign):
            if not 0 <= i < self.n_generators:
                raise ValidationError(f"load {k} assigned to missing generator {i}")

    @classmethod
    def default(cls, m: int, n: int) -> "Assignment":
        return cls(tuple(k % n for k in range(m)), n)

    def matrix(self) -> np.ndarray:
        """The 0/1 matrix d with d[i, k] = 1 iff load k reports to generator i."""
        d = np.zeros((self.n_generators, len(self.assign)))
        for k, i in enumerate(self.assign):
            d[i, k] = 1.0
        return d


def aggregate(demands: Sequence[float], assignment: Assignment) -> np.ndarray:
    """Per-generator sum of assigned demands, accumulated in ascending load order."""
    P = np.zeros(assignment.n_generators)
    for k, i in enumerate(assignment.assign):
        P[i] += demands[k]
    return P


def initial_dispatch(loads: LoadSchedule, assignment: Assignment) -> np.ndarray:
    if len(assignment.assign) != loads.m:
        raise ValidationError(f"assignment covers {len(assignment.assign)} loads, schedule has {loads.m}")
    return aggregate(loads.loads, assignment)


def demand_levels(loads: LoadSchedule) -> list[float]:
    return [_sum_ordered(loads.loads)] + [_sum_ordered(d) for _, d in loads.events]


def check_feasible(params: Sequence[GeneratorParams], loads: LoadSchedule, rtol: float = 1e-12) -> None:
    """Raise ``Infeasible`` unless every demand level lies in [sum p_min, sum p_max]."""
    lo = sum(g.p_min for g in params)
    hi = sum(g.p_max for g in params)
    for level in demand_levels(loads):
        slack = rtol * max(1.0, abs(level))
        if level < lo - slack or level > hi + slack:
            raise Infeasible(f"demand {level} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SystemState:
    P: np.ndarray
    lam: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        lam = np.array(self.lam, dtype=float)
        if P.shape != lam.shape or P.ndim != 1:
            raise ValidationError("P and lambda must be equal-length vectors")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "lam", lam)


@dataclass
class Case:
    """Parsed case file."""

    generators: list[GeneratorParams]
    loads: LoadSchedule
    assignment: Assignment
    name: str = ""
    source: str = ""
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``gens, loads, assign = load_case(path)``
        return iter((self.generators, self.loads, self.assignment))


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    return d[key]


def _as_float(v, where: str) -> float:
    if v is None:
        return math.inf
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: expected a number, got {v!r}") from None


def case_from_dict(data: dict, where: str = "case") -> Case:
    gens_raw = _require(data, "generators", where)
    if not isinstance(gens_raw, list) or not gens_raw:
        raise ParseError(f"{where}: 'generators' must be a non-empty list")
    gens = []
    for i, g in enumerate(gens_raw):
        w = f"{where}: generators[{i}]"
        gens.append(GeneratorParams(
            alpha=_as_float(_require(g, "alpha", w), w + ".alpha"),
            beta=_as_float(_require(g, "beta", w), w + ".beta"),
            gamma=_as_float(g.get("gamma", 0.0), w + ".gamma"),
            p_min=_as_float(g.get("p_min", 0.0), w + ".p_min"),
            p_max=_as_float(g.get("p_max", None), w + ".p_max"),
            name=str(g.get("name", "")),
        ))
    loads = LoadSchedule.from_dict(data.get("loads", {"loads": []}))
    if "assignment" in data and data["assignment"] is not None:
        assignment = Assignment(tuple(data["assignment"]), len(gens))
    else:
        assignment = Assignment.default(loads.m, len(gens))
    if len(assignment.assign) != loads.m:
        raise ValidationError(f"{where}: assignment covers {len(assignment.assign)} loads, expected {loads.m}")
    extra = {k: v for k, v in data.items()
             if k not in {"generators", "loads", "assignment", "name", "source"}}
    return Case(gens, loads, assignment, str(data.get("name", "")), str(data.get("source", "")), extra)


def case_to_dict(case: Case) -> dict:
    d = {"name": case.name, "source": case.source,
         "generators": [g.to_dict() for g in case.generators],
         "loads": case.loads.to_dict(),
         "assignment": list(case.assignment.assign)}
    d.update(case.extra)
    return d


def shipped_case_path(name: str) -> Path:
    return Path(str(resources.files("fxted") / "data" / f"{name}.json"))


def resolve_case_path(ref: str | Path, base: Path | None = None) -> Path:
    """A path as given, relative to ``base``, or the name of a shipped case."""
    p = Path(ref)
    if p.is_file():
        return p
    if base is not None and (base / p).is_file():
        return base / p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    shipped = shipped_case_path(stem)
    if shipped.is_file():
        return shipped
    raise ParseError(f"case file {str(ref)!r} not found")


def load_case(path: str | Path) -> Case:
    path = resolve_case_path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return case_from_dict(data, where=str(path))


def save_case(case: Case, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=2) + "\n")
