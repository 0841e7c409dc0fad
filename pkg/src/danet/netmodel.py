"""Network topology, commodities, utilities, and feasibility checks.

Nodes are integer ids. A link is an unordered node pair with one shared
capacity in packets/slot; ``(i, j)`` and ``(j, i)`` resolve to the same
record. Directed quantities (link rates) are keyed by ordered pairs over
the directed versions of declared links.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError

DEFAULT_FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class UtilitySpec:
    """Weighted-log utility U(x) = weight * ln(x)."""

    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"utility weight must be positive, got {self.weight}")

    def value(self, x: float) -> float:
        if x <= 0:
            raise DomainError(f"log utility undefined at x={x}")
        return self.weight * math.log(x)

    def marginal_inverse(self, y: float) -> float:
        """U'^{-1}(y); for weighted log, weight / y."""
        if y <= 0:
            return math.inf
        return self.weight / y


@dataclass(frozen=True)
class Commodity:
    """Traffic class identified by its destination node."""

    id: int
    destination: int
    sources: tuple[tuple[int, UtilitySpec], ...]

    def __post_init__(self):
        for node, _ in self.sources:
            if node == self.destination:
                raise ValueError(
                    f"commodity {self.id}: source {node} equals destination"
                )

    @property
    def source_nodes(self) -> list[int]:
        return [s for s, _ in self.sources]


class NetworkGraph:
    """Bidirectional capacitated graph: the (nodes, links, capacities) triple."""

    def __init__(self, nodes, links):
        """``links`` is an iterable of (i, j, capacity)."""
        self.nodes = sorted(set(nodes))
        node_set = set(self.nodes)
        self.capacity = {}
        self.neighbors = {n: [] for n in self.nodes}
        for i, j, c in links:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if i not in node_set or j not in node_set:
                raise ValueError(f"link ({i},{j}) references undeclared node")
            if c <= 0:
                raise ValueError(f"link ({i},{j}) capacity must be positive, got {c}")
            key = (i, j) if i < j else (j, i)
            if key in self.capacity:
                raise ValueError(f"duplicate link {key}")
            self.capacity[key] = float(c)
            self.neighbors[i].append(j)
            self.neighbors[j].append(i)
        for n in self.nodes:
            self.neighbors[n].sort()
        self.links = sorted(self.capacity)

    def __contains__(self, pair) -> bool:
        i, j = pair
        return ((i, j) if i < j else (j, i)) in self.capacity

    def cap(self, i, j) -> float:
        return self.capacity[(i, j) if i < j else (j, i)]

    def directed_links(self) -> list[tuple[int, int]]:
        out = []
        for i, j in self.links:
            out.append((i, j))
            out.append((j, i))
        return out

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_links(self) -> int:
        return len(self.links)


def build_grid(side: int, capacity: float) -> NetworkGraph:
    """side x side grid, row-major node numbering, uniform link capacity."""
    if side < 2:
        raise ValueError(f"grid side must be >= 2, got {side}")
    nodes = range(side * side)
    links = []
    for r in range(side):
        for c in range(side):
            n = r * side + c
            if c + 1 < side:
                links.append((n, n + 1, capacity))
            if r + 1 < side:
                links.append((n, n + side, capacity))
    return NetworkGraph(nodes, links)


def build_tandem(hops: int, capacity: float) -> NetworkGraph:
    """Chain of ``hops`` links; node 0 is the destination end, node ``hops`` the far end."""
    if hops < 1:
        raise ValueError(f"tandem hops must be >= 1, got {hops}")
    links = [(i - 1, i, capacity) for i in range(1, hops + 1)]
    return NetworkGraph(range(hops + 1), links)


@dataclass
class RatePoint:
    """Exogenous rates x[(source, commodity)] and directed link rates r[(i, j, commodity)]."""

    x: dict[tuple[int, int], float] = field(default_factory=dict)
    r: dict[tuple[int, int, int], float] = field(default_factory=dict)


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: list[tuple[str, tuple, float]]


def check_feasible(
    graph: NetworkGraph,
    commodities: list[Commodity],
    point: RatePoint,
    tolerance: float = DEFAULT_FEASIBILITY_TOL,
) -> FeasibilityReport:
    """Check nonnegativity, per-link capacity, and per-node flow conservation.

    Conservation is the inequality form: exogenous + inflow <= outflow at every
    node other than the commodity's destination. Violations report
    (constraint id, location, magnitude over tolerance).
    """
    comm_ids = {c.id: c for c in commodities}
    violations = []

    for key, v in point.x.items():
        node, d = key
        if d not in comm_ids:
            raise ValueError(f"x references unknown commodity {d}")
        if node not in graph.neighbors:
            raise ValueError(f"x references unknown node {node}")
        if v < -tolerance:
            violations.append(("nonneg-x", key, -v))

    for key, v in point.r.items():
        i, j, d = key
        if d not in comm_ids:
            raise ValueError(f"r references unknown commodity {d}")
        if (i, j) not in graph:
            raise ValueError(f"r references undeclared link ({i},{j})")
        if v < -tolerance:
            violations.append(("nonneg-r", key, -v))

    for i, j in graph.links:
        total = 0.0
        for d in comm_ids:
            total += point.r.get((i, j, d), 0.0) + point.r.get((j, i, d), 0.0)
        excess = total - graph.cap(i, j)
        if excess > tolerance:
            violations.append(("capacity", (i, j), excess))

    for c in commodities:
        for n in graph.nodes:
            if n == c.destination:
                continue
            inflow = point.x.get((n, c.id), 0.0)
            outflow = 0.0
            for m in graph.neighbors[n]:
                inflow += point.r.get((m, n, c.id), 0.0)
                outflow += point.r.get((n, m, c.id), 0.0)
            deficit = inflow - outflow
            if deficit > tolerance:
                violations.append(("conservation", (n, c.id), deficit))

    return FeasibilityReport(feasible=not violations, violations=violations)


def objective_value(commodities: list[Commodity], point: RatePoint) -> float:
    """Sum of source utilities at the point's exogenous rates."""
    total = 0.0
    for c in commodities:
        for s, util in c.sources:
            total += util.value(point.x.get((s, c.id), 0.0))
    return total


def gg1_delay_bound(
    var_interarrival: float,
    var_service: float,
    mean_interarrival: float,
    utilization: float,
) -> float:
    """G/G/1 mean-waiting-time bound (sigma_a^2 + sigma_b^2) / (2 tbar (1 - rho))."""
    if var_interarrival < 0 or var_service < 0:
        raise ValueError("variances must be nonnegative")
    if mean_interarrival <= 0:
        raise ValueError("mean interarrival must be positive")
    if not 0 <= utilization < 1:
        raise ValueError(f"utilization must be in [0, 1), got {utilization}")
    return (var_interarrival + var_service) / (
        2.0 * mean_interarrival * (1.0 - utilization)
    )
