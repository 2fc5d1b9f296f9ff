"""Fixed-time distributed economic dispatch: dynamics, oracles, scenarios."""

from fxted.constrained import algorithm1
from fxted.discrete import discrete_solve
from fxted.dynamics import Gains, NoiseModel, settling_bounds, simulate
from fxted.graphnet import Topology, TopologySchedule
from fxted.model import GeneratorParams, LoadSchedule, load_case
from fxted.oracle import constrained_optimum, unconstrained_optimum
from fxted.scenarios import Scenario, load_scenario, random_scenario

__all__ = ["algorithm1", "discrete_solve", "Gains", "NoiseModel", "settling_bounds", "simulate", "Topology",
           "TopologySchedule", "GeneratorParams", "LoadSchedule", "load_case", "constrained_optimum",
           "unconstrained_optimum", "Scenario", "load_scenario", "random_scenario"]
