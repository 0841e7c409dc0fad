"""Invariant suites behind the ``danet verify`` subcommand.

Also home of the randomized generators the property checks are built on:
feasible rate points made of superposed random paths, and token-process
instances drawn on a dyadic grid so the batch runner's arithmetic is exact.
"""

from __future__ import annotations

import numpy as np

from . import netmodel, routing, scheduler, tandem
from .netmodel import Commodity, NetworkGraph, RatePoint, UtilitySpec

DYADIC = 2**16


def random_simple_path(graph: NetworkGraph, src: int, dst: int, rng) -> list[int]:
    """Randomized depth-first simple path; exists whenever the graph is connected."""
    stack = [src]
    visited = {src}
    while stack:
        cur = stack[-1]
        if cur == dst:
            return list(stack)
        nbrs = [m for m in graph.neighbors[cur] if m not in visited]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        visited.add(nxt)
        stack.append(nxt)
    raise RuntimeError(f"no path from {src} to {dst}")


def random_feasible_point(
    graph: NetworkGraph,
    commodities: list[Commodity],
    rng,
    paths_per_source: int = 3,
) -> RatePoint:
    """Superpose random source->destination paths within remaining capacity.

    Each source gets at least one path with a strictly positive rate, so the
    point is feasible with flow conservation met with equality and every
    declared x entry positive.
    """
    remaining = dict(graph.capacity)
    point = RatePoint()
    for c in commodities:
        for s, _ in c.sources:
            n_paths = 1 + int(rng.integers(paths_per_source))
            for _ in range(n_paths):
                path = random_simple_path(graph, s, c.destination, rng)
                keys = [
                    (a, b) if a < b else (b, a)
                    for a, b in zip(path[:-1], path[1:])
                ]
                slack = min(remaining[k] for k in keys)
                if slack <= 1e-9:
                    continue
                rate = slack * (0.1 + 0.8 * rng.random())
                for k, (a, b) in zip(keys, zip(path[:-1], path[1:])):
                    remaining[k] -= rate
                    key = (a, b, c.id)
                    point.r[key] = point.r.get(key, 0.0) + rate
                point.x[(s, c.id)] = point.x.get((s, c.id), 0.0) + rate
            if (s, c.id) not in point.x:
                # capacity exhausted by earlier sources; take a sliver of any path
                path = random_simple_path(graph, s, c.destination, rng)
                keys = [
                    (a, b) if a < b else (b, a)
                    for a, b in zip(path[:-1], path[1:])
                ]
                rate = min(remaining[k] for k in keys) * 0.5
                rate = max(rate, 1e-12)
                for k, (a, b) in zip(keys, zip(path[:-1], path[1:])):
                    remaining[k] -= rate
                    key = (a, b, c.id)
                    point.r[key] = point.r.get(key, 0.0) + rate
                point.x[(s, c.id)] = rate
    return point


def random_token_instances(count: int, rng, max_counters: int = 8):
    """(nu, c_th, m0) triples on a 2^-16 grid with sum(nu) <= 0.85 c_th.

    Dyadic values keep every add/subtract in the token process exact in
    double precision, so region membership checks carry no rounding slack.
    """
    out = []
    for _ in range(count):
        n = 1 + int(rng.integers(max_counters))
        c_th = int(rng.integers(8, 65)) / 16.0  # 0.5 .. 4.0
        frac = int(rng.integers(2, 14)) / 16.0  # 0.125 .. 0.8125
        weights = rng.integers(1, 100, n).astype(float)
        target = c_th * frac
        nu = np.round(target * weights / weights.sum() * DYADIC) / DYADIC
        nu = np.maximum(nu, 1.0 / DYADIC)
        if nu.sum() >= 0.9 * c_th:
            nu = np.floor(nu / 2 * DYADIC) / DYADIC
            nu = np.maximum(nu, 1.0 / DYADIC)
        m0 = rng.integers(0, int(100 * c_th * 16) + 1, n) / 16.0
        out.append((nu, c_th, m0.astype(float)))
    return out


def entry_bound(nu, c_th: float, m0) -> int:
    """Slots to reach the invariant region, from the drift argument.

    Outside the region the sum drops by exactly c_th - sum(nu) per slot;
    floor + 1 is the ceiling adjusted for the region's strict inequality
    (when the drift divides the excess exactly, the sum lands on the
    boundary at the ceiling step and enters one slot later).
    """
    total = float(np.asarray(m0).sum())
    n = len(nu)
    bound = (n + 1) * c_th
    if total < bound:
        return 0
    drift = c_th - float(np.asarray(nu).sum())
    return int(np.floor((total - bound) / drift)) + 1


# ------------------------------------------------------------------- suites

def suite_tandem_oracle():
    checks = []
    for a in (0.1, 0.5, 0.9):
        qm = tandem.stationary(tandem.enumerate_chain(1, a))
        checks.append(
            (f"tandem n=1 a={a}: mean equals a", abs(qm.of_node(1) - a) < 1e-10,
             f"got {qm.of_node(1)!r}")
        )
    for hops in (2, 3):
        rep = tandem.verify_monotone(hops, np.linspace(0.1, 0.9, 5))
        checks.append(
            (f"tandem n={hops}: strictly decreasing means", rep.all_strict, "")
        )
    return checks


def suite_token_region(count: int = 100, horizon: int = 20000, seed: int = 1):
    rng = np.random.default_rng(seed)
    instances = random_token_instances(count, rng)
    ok = True
    detail = ""
    for nu, c_th, m0 in instances:
        res = scheduler.token_process_run(nu, c_th, m0, horizon)
        bound = entry_bound(nu, c_th, m0)
        if res.entry_slot < 0 or res.entry_slot > bound or not res.stayed:
            ok = False
            detail = f"violation at nu={nu}, c_th={c_th}"
            break
    return [(f"token process region, {count} instances", ok, detail)]


def suite_mapping(points: int = 100, seed: int = 2):
    rng = np.random.default_rng(seed)
    graph = netmodel.build_grid(4, 1.0)
    comms = [
        Commodity(0, 15, ((0, UtilitySpec(1.0)),)),
        Commodity(1, 3, ((12, UtilitySpec(1.0)),)),
    ]
    ok = True
    detail = ""
    for _ in range(points):
        p = random_feasible_point(graph, comms, rng)
        if not netmodel.check_feasible(graph, comms, p).feasible:
            ok, detail = False, "generator produced an infeasible point"
            break
        mapped = routing.map_rate_point(p)
        rep = netmodel.check_feasible(graph, comms, mapped)
        if not rep.feasible:
            ok, detail = False, f"mapped point infeasible: {rep.violations[:2]}"
            break
        if mapped.x != p.x:
            ok, detail = False, "mapping changed x"
            break
        for (i, j, d), v in mapped.r.items():
            rev = mapped.r.get((j, i, d), 0.0)
            net = p.r.get((i, j, d), 0.0) - p.r.get((j, i, d), 0.0)
            if min(v, rev) != 0.0 or abs((v - rev) - net) > 0.0:
                ok, detail = False, f"identity broken at ({i},{j},{d})"
                break
        if not ok:
            break
    return [(f"net-rate mapping feasibility, {points} points", ok, detail)]


def suite_token_accounting(seed: int = 3):
    from .crosslayer import CrossLayerConfig, CrossLayerRun

    graph = NetworkGraph(
        [1, 2, 3, 4, 5],
        [(1, 2, 1.0), (2, 3, 1.0), (2, 4, 1.0), (2, 5, 1.0), (4, 5, 1.0)],
    )
    comms = [Commodity(0, 3, ((1, UtilitySpec(1.0)),))]
    cfg = CrossLayerConfig(window=500, period=500, seed=seed, K=50.0)
    run = CrossLayerRun(graph, comms, cfg)
    for _ in range(3000):
        run.step()
    err = run.sched.conservation_error()
    checks = [
        ("token conservation <= 1e-9", err <= 1e-9, f"err={err:.2e}"),
        (
            "token region never violated",
            run.sched.token_region_violations == 0,
            f"{run.sched.token_region_violations} slots",
        ),
    ]
    return checks


def run_all(fast: bool = False):
    suites = [
        suite_tandem_oracle(),
        suite_token_region(20 if fast else 100, 5000 if fast else 20000),
        suite_mapping(20 if fast else 100),
        suite_token_accounting(),
    ]
    return [check for suite in suites for check in suite]
