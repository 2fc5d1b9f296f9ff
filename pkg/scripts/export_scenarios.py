"""Write the canned case-study scenarios and a small demo to ``scenarios/`` as JSON.

    python3 scripts/export_scenarios.py [OUT_DIR]
"""

import sys
from pathlib import Path

from fxted.graphnet import TopologySchedule, path_graph
from fxted.model import Assignment, GeneratorParams, LoadSchedule
from fxted.dynamics import Gains
from fxted.scenarios import CANNED, Scenario, random_scenario, save_scenario


def two_bus_demo() -> Scenario:
    gens = (GeneratorParams(0.5, 0.0, name="g0"), GeneratorParams(0.5, 0.0, name="g1"))
    loads = LoadSchedule((1.0, 1.0))
    return Scenario(name="two-bus", generators=gens, topology_schedule=TopologySchedule.static(path_graph(2)),
                    gains=Gains(), loads=loads, assignment=Assignment.default(2, 2), t_end=20.0,
                    lambda0=(0.0, 2.0))


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, ctor in CANNED.items():
        save_scenario(ctor(), out / f"{name}.json")
    save_scenario(two_bus_demo(), out / "two-bus.json")
    save_scenario(random_scenario(5, seed=7, constrained=True), out / "random-constrained-n5.json")
    for p in sorted(out.glob("*.json")):
        print(p)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "scenarios")
