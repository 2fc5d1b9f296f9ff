"""Undirected communication graphs, Laplacians and their spectra.

Also holds the switching schedule that picks the active topology over time.
Everything here is small-n (a few dozen generator buses at most), so the
eigensolver is a plain cyclic Jacobi iteration rather than LAPACK.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from fxted.errors import DisconnectedTopology, NonSymmetric, ParseError, ValidationError

DEDUP_TOL = 1e-9
CONNECTED_TOL = 1e-9


@dataclass(frozen=True)
class Topology:
    """Undirected 0/1 adjacency over ``n`` nodes."""

    adjacency: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {A.shape}")
        if not np.array_equal(A, A.T):
            raise ValidationError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ValidationError("adjacency must have a zero diagonal")
        if not np.all((A == 0) | (A == 1)):
            raise ValidationError("adjacency entries must be 0 or 1")
        A.setflags(write=False)
        object.__setattr__(self, "adjacency", A)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Sequence[int]]) -> "Topology":
        A = np.zeros((n, n))
        for e in edges:
            if len(e) != 2:
                raise ParseError(f"edge {e!r} must have two endpoints")
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise ValidationError(f"self-loop at node {i}")
            A[i, j] = A[j, i] = 1.0
        return cls(A)

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(int(a), int(b)) for a, b in zip(i, j)]

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return i.astype(np.int64), j.astype(np.int64)

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        try:
            n = int(d["n"])
            edges = d["edges"]
        except KeyError as exc:
            raise ParseError(f"topology missing field {exc.args[0]!r}") from None
        return cls.from_edges(n, edges)

    # frozen dataclass with an ndarray field: hash/eq by content
    def __eq__(self, other):
        return isinstance(other, Topology) and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash(self.adjacency.tobytes())


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    distinct_nonzero: np.ndarray
    lambda2: float


def complete_graph(n: int) -> Topology:
    return Topology(np.ones((n, n)) - np.eye(n))


def path_graph(n: int) -> Topology:
    return Topology.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def ring_graph(n: int) -> Topology:
    if n < 3:
        return path_graph(n)
    return Topology.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def laplacian(topology: Topology) -> np.ndarray:
    A = topology.adjacency
    return np.diag(A.sum(axis=1)) - A


@numba.njit(cache=True)
def _jacobi(A, tol, max_sweeps):
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += A[i, j] * A[i, j]
        if math.sqrt(off) <= tol:
            return A, V, True
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    return A, V, False


def jacobi_eigh(M: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, Q)`` with ``w`` ascending and ``M ~= Q @ diag(w) @ Q.T``.
    The stopping test is on the off-diagonal Frobenius norm, scaled by
    ``max(1, ||M||_F)`` so large-entry matrices still terminate.
    """
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    if M.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    if np.max(np.abs(M - M.T)) > 1e-12:
        raise NonSymmetric(f"max asymmetry {np.max(np.abs(M - M.T)):.3e} exceeds 1e-12")
    M = 0.5 * (M + M.T)
    scale = max(1.0, float(np.linalg.norm(M)))
    D, V, ok = _jacobi(M, tol * scale, max_sweeps)
    if not ok:
        raise RuntimeError("Jacobi eigensolver did not converge")
    w = np.diag(D).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def distinct_values(values: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    """Collapse an ascending array into clusters closer than ``tol`` (first member kept)."""
    out: list[float] = []
    for v in values:
        if not out or v - out[-1] > tol:
            out.append(float(v))
    return np.array(out)


def spectrum(L: np.ndarray) -> Spectrum:
    w, _ = jacobi_eigh(L)
    nonzero = w[w > DEDUP_TOL]
    lam2 = float(w[1]) if len(w) > 1 else 0.0
    return Spectrum(eigenvalues=w, distinct_nonzero=distinct_values(nonzero), lambda2=lam2)


def is_connected(topology: Topology) -> bool:
    n = topology.n
    if n <= 1:
        return True
    A = topology.adjacency
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.nonzero(A[i])[0]:
            if not seen[j]:
                seen[j] = True
                queue.append(int(j))
    return bool(seen.all())


def algebraic_connectivity(topology: Topology) -> float:
    return float(spectrum(laplacian(topology)).lambda2)


@dataclass(frozen=True)
class TopologySchedule:
    """Piecewise-constant, right-continuous switching signal over a set of topologies.

    ``phases`` holds ``(start_time, topology_index)`` pairs; the first start
    time is 0 and start times increase strictly.
    """

    topologies: tuple[Topology, ...]
    phases: tuple[tuple[float, int], ...] = field(default=((0.0, 0),))

    def __post_init__(self):
        topos = tuple(self.topologies)
        phases = tuple((float(t), int(k)) for t, k in self.phases)
        object.__setattr__(self, "topologies", topos)
        object.__setattr__(self, "phases", phases)
        if not topos:
            raise ValidationError("schedule needs at least one topology")
        n = topos[0].n
        if any(t.n != n for t in topos):
            raise ValidationError("all topologies in a schedule must share the node count")
        if not phases or phases[0][0] != 0.0:
            raise ValidationError("first phase must start at t=0")
        starts = [t for t, _ in phases]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValidationError("phase start times must be strictly increasing")
        for _, k in phases:
            if not 0 <= k < len(topos):
                raise ValidationError(f"phase references missing topology {k}")
        for _, k in phases:
            if not is_connected(topos[k]):
                raise DisconnectedTopology(f"topology {k} is not connected")

    @classmethod
    def static(cls, topology: Topology) -> "TopologySchedule":
        return cls((topology,), ((0.0, 0),))

    @property
    def n(self) -> int:
        return self.topologies[0].n

    @property
    def is_static(self) -> bool:
        return len({k for _, k in self.phases}) == 1

    def used_topologies(self) -> list[Topology]:
        return [self.topologies[k] for k in sorted({k for _, k in self.phases})]

    def to_dict(self) -> dict:
        return {
            "topologies": [t.to_dict() for t in self.topologies],
            "phases": [{"t": t, "topology": k} for t, k in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySchedule":
        if "topologies" not in d:
            # a bare topology is a one-phase schedule
            if "n" in d and "edges" in d:
                return cls.static(Topology.from_dict(d))
            raise ParseError("schedule missing field 'topologies'")
        topos = [Topology.from_dict(t) for t in d["topologies"]]
        raw = d.get("phases", [{"t": 0.0, "topology": 0}])
        try:
            phases = [(float(p["t"]), int(p["topology"])) for p in raw]
        except KeyError as exc:
            raise ParseError(f"phase missing field {exc.args[0]!r}") from None
        return cls(tuple(topos), tuple(phases))


def active_topology(schedule: TopologySchedule, t: float) -> Topology:
    k = schedule.phases[0][1]
    for start, idx in schedule.phases:
        if start <= t:
            k = idx
        else:
            break
    return schedule.topologies[k]


def lambda2_star(schedule: TopologySchedule) -> float:
    """Smallest algebraic connectivity over every topology the schedule activates."""
    worst = math.inf
    for k in sorted({k for _, k in schedule.phases}):
        topo = schedule.topologies[k]
        if not is_connected(topo):
            raise DisconnectedTopology(f"topology {k} is not connected")
        worst = min(worst, algebraic_connectivity(topo))
    if schedule.n == 1:
        # single node: no disagreement to remove; treat connectivity as unbounded-free
        return math.inf
    return worst


def lambda_max_star(schedule: TopologySchedule) -> float:
    return float(max(spectrum(laplacian(t)).eigenvalues[-1] for t in schedule.used_topologies()))


def random_connected_topology(n: int, rng: np.random.Generator, p_edge: float = 0.5,
                              max_tries: int = 10_000) -> Topology:
    """Erdos-Renyi G(n, p_edge), rejected until connected."""
    if n <= 1:
        return Topology(np.zeros((max(n, 1), max(n, 1))))
    for _ in range(max_tries):
        U = rng.random((n, n)) < p_edge
        A = np.triu(U, 1).astype(float)
        topo = Topology(A + A.T)
        if is_connected(topo):
            return topo
    raise RuntimeError(f"no connected G({n}, {p_edge}) sample in {max_tries} tries")


def random_schedule(n: int, rng: np.random.Generator, n_phases: int, interval: float,
                    p_edge: float = 0.5) -> TopologySchedule:
    topos = tuple(random_connected_topology(n, rng, p_edge) for _ in range(n_phases))
    phases = tuple((i * interval, i) for i in range(n_phases))
    return TopologySchedule(topos, phases)


def load_schedule(path: str | Path) -> TopologySchedule:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return TopologySchedule.from_dict(data)
