import numpy as np
import pytest

from danet import (
    Commodity,
    NetIndex,
    NetRateAccumulator,
    NotReadyError,
    PolicyConfig,
    PriceSim,
    RatePoint,
    UtilitySpec,
    build_grid,
    build_subgraph,
    build_tandem,
    check_assumption2,
    check_feasible,
    check_loop_free,
    map_rate_point,
    objective_value,
    snapshot_net_rates,
)
from danet.bp import LinkDecisions, SlotTrace
from danet.routing import FULL_HISTORY, MOVING_WINDOW, CommoditySubgraph
from danet.verify import random_feasible_point

TRIANGLE_LINKS = [(1, 2), (2, 3), (2, 4), (2, 5), (4, 5)]


def make_acc(links, comms=(0,), window=4, period=4):
    return NetRateAccumulator(list(links), list(comms), window, period)


def trace_with(links, grants, slot=0):
    """grants: list of (link_index, direction, comm_index, rate)."""
    if grants:
        l, d, c, r = map(np.array, zip(*grants))
    else:
        l = d = c = r = np.array([], dtype=int)
    dec = LinkDecisions(
        link=l, comm=c, direction=np.asarray(d, dtype=np.int8),
        sender=np.zeros_like(l), receiver=np.zeros_like(l),
        rate=np.asarray(r, dtype=float),
    )
    return SlotTrace(slot, dec, np.zeros((1, 1)), np.zeros((1, 1)))


def test_accumulate_empty_trace():
    acc = make_acc([(0, 1)])
    acc.accumulate(trace_with([(0, 1)], []))
    assert acc.window_sum.sum() == 0
    assert acc.count == 1


def test_accumulate_single_grant():
    acc = make_acc([(0, 1)])
    acc.accumulate(trace_with([(0, 1)], [(0, 0, 0, 1.0)]))
    assert acc.window_sum[0, 0, 0] == 1.0
    assert acc.cum_sum[0, 0, 0] == 1.0


def test_accumulate_ring_semantics():
    acc = make_acc([(0, 1)], window=4)
    for t in range(4):
        acc.accumulate(trace_with([(0, 1)], [(0, 0, 0, 1.0)], slot=t))
    assert acc.window_sum[0, 0, 0] == 4.0
    acc.accumulate(trace_with([(0, 1)], [], slot=4))
    assert acc.window_sum[0, 0, 0] == 3.0  # oldest grant dropped
    assert acc.cum_sum[0, 0, 0] == 4.0


def test_accumulate_out_of_order():
    acc = make_acc([(0, 1)])
    acc.accumulate(trace_with([(0, 1)], [], slot=0))
    with pytest.raises(ValueError):
        acc.accumulate(trace_with([(0, 1)], [], slot=5))


def test_snapshot_net_rates():
    acc = make_acc([(0, 1)], window=10)
    for t in range(10):
        grants = [(0, 0, 0, 1.0)] if t < 7 else []
        if t < 2:
            grants.append((0, 1, 0, 1.0))
        acc.accumulate(trace_with([(0, 1)], grants, slot=t))
    snap = snapshot_net_rates(acc, MOVING_WINDOW)
    assert snap.rhat[0, 0, 0] == pytest.approx(0.5)  # 0.7 forward vs 0.2 back
    assert snap.rhat[0, 1, 0] == 0.0
    assert snap.gross[0, 0] == pytest.approx(0.9)


def test_snapshot_equal_rates_cancel():
    acc = make_acc([(0, 1)], window=10)
    for t in range(10):
        grants = [(0, 0, 0, 1.0), (0, 1, 0, 1.0)] if t < 3 else []
        acc.accumulate(trace_with([(0, 1)], grants, slot=t))
    snap = snapshot_net_rates(acc, MOVING_WINDOW)
    assert snap.rhat[0, 0, 0] == 0.0
    assert snap.rhat[0, 1, 0] == 0.0


def test_snapshot_reverse_direction():
    acc = make_acc([(0, 1)], window=10)
    for t in range(10):
        grants = [(0, 1, 0, 1.0)] if t < 4 else []
        acc.accumulate(trace_with([(0, 1)], grants, slot=t))
    snap = snapshot_net_rates(acc, MOVING_WINDOW)
    assert snap.rhat[0, 1, 0] == pytest.approx(0.4)
    assert snap.rhat[0, 0, 0] == 0.0


def test_snapshot_not_ready():
    acc = make_acc([(0, 1)], window=10)
    with pytest.raises(NotReadyError):
        snapshot_net_rates(acc, FULL_HISTORY)
    acc.accumulate(trace_with([(0, 1)], [], slot=0))
    snapshot_net_rates(acc, FULL_HISTORY)  # one slot suffices for full history
    with pytest.raises(NotReadyError):
        snapshot_net_rates(acc, MOVING_WINDOW)
    with pytest.raises(ValueError):
        snapshot_net_rates(acc, "weekly")


def test_map_rate_point_pairwise():
    point = RatePoint(x={(0, 0): 0.3}, r={(0, 1, 0): 0.7, (1, 0, 0): 0.2})
    mapped = map_rate_point(point)
    assert mapped.r[(0, 1, 0)] == pytest.approx(0.5)
    assert mapped.r[(1, 0, 0)] == 0.0
    assert mapped.x == point.x


def test_map_rate_point_preserves_feasibility_and_objective():
    graph = build_grid(4, 1.0)
    comms = [
        Commodity(0, 15, ((0, UtilitySpec(1.0)),)),
        Commodity(1, 3, ((12, UtilitySpec(1.5)),)),
    ]
    rng = np.random.default_rng(21)
    for _ in range(100):
        point = random_feasible_point(graph, comms, rng)
        mapped = map_rate_point(point)
        assert check_feasible(graph, comms, mapped).feasible
        assert objective_value(comms, mapped) == objective_value(comms, point)
        for (i, j, d), v in mapped.r.items():
            rev = mapped.r[(j, i, d)]
            net = point.r.get((i, j, d), 0.0) - point.r.get((j, i, d), 0.0)
            assert min(v, rev) == 0.0
            assert (v - rev) == pytest.approx(net, abs=0.0)


def triangle_snapshot(rates):
    """rates: dict[(i, j)] -> average one-way rate for the single commodity."""
    acc = make_acc(TRIANGLE_LINKS, window=10)
    grants = []
    for (i, j), rate in rates.items():
        key = (i, j) if i < j else (j, i)
        l = acc.links.index(key)
        direction = 0 if i < j else 1
        grants.append((l, direction, 0, rate))
    # constant grants: the averages equal the per-slot rates
    for t in range(10):
        acc.accumulate(trace_with(TRIANGLE_LINKS, grants, slot=t))
    return snapshot_net_rates(acc, MOVING_WINDOW)


def test_build_subgraph_all_zero():
    snap = triangle_snapshot({})
    sub = build_subgraph(snap, 0)
    assert sub.edges == []


def test_build_subgraph_triangle_balanced_churn():
    # forward flow on (1,2),(2,3); equal two-way traffic on (2,4),(2,5)
    snap = triangle_snapshot(
        {(1, 2): 1.0, (2, 3): 1.0, (2, 4): 0.4, (4, 2): 0.4, (2, 5): 0.3, (5, 2): 0.3}
    )
    sub = build_subgraph(snap, 0, threshold=1e-3)
    assert sorted(sub.edges) == [(1, 2), (2, 3)]


def test_build_subgraph_threshold_above_max():
    snap = triangle_snapshot({(1, 2): 0.5})
    sub = build_subgraph(snap, 0, threshold=0.9)
    assert sub.edges == []
    with pytest.raises(ValueError):
        build_subgraph(snap, 99)


def test_check_loop_free_cycle_witness():
    sub = CommoditySubgraph(0, [(2, 4), (4, 5), (5, 2)], {})
    cert = check_loop_free(sub)
    assert not cert.acyclic
    assert cert.cycle == [2, 4, 5, 2]
    edges = set(sub.edges)
    for a, b in zip(cert.cycle[:-1], cert.cycle[1:]):
        assert (a, b) in edges


def test_check_loop_free_single_edge():
    cert = check_loop_free(CommoditySubgraph(0, [(1, 2)], {}))
    assert cert.acyclic and cert.longest_path == 1
    assert cert.order == [1, 2]


def test_check_loop_free_empty():
    cert = check_loop_free(CommoditySubgraph(0, [], {}))
    assert cert.acyclic and cert.longest_path == 0


def test_check_loop_free_order_and_longest_path():
    # diamond with a tail: longest path 1-2-4-5 = 3 hops
    edges = [(1, 2), (1, 3), (2, 4), (3, 4), (4, 5)]
    cert = check_loop_free(CommoditySubgraph(0, edges, {}))
    assert cert.acyclic
    assert cert.longest_path == 3
    pos = {n: k for k, n in enumerate(cert.order)}
    for u, v in edges:
        assert pos[u] < pos[v]


def test_check_loop_free_cycle_with_upstream_tail():
    # a tail feeding a cycle: witness must come from the cycle itself
    edges = [(0, 1), (1, 2), (2, 3), (3, 1)]
    cert = check_loop_free(CommoditySubgraph(0, edges, {}))
    assert not cert.acyclic
    assert cert.cycle[0] == cert.cycle[-1]
    assert set(cert.cycle) == {1, 2, 3}


def test_check_assumption2_constructed_violation():
    snap = triangle_snapshot({(1, 2): 0.5})
    means = {(1, 0): 1.0, (2, 0): 3.0}  # price increases along the net flow
    violations = check_assumption2(snap, means)
    assert len(violations) == 1
    assert violations[0][:3] == (1, 2, 0)


def test_check_assumption2_vacuous_on_zero_rates():
    snap = triangle_snapshot({})
    assert check_assumption2(snap, {}) == []


def test_check_assumption2_converged_tandem():
    """Simulate 1e5 slots at a=0.8 and compare running means along the flow."""
    hops, a, slots = 4, 0.8, 100_000
    graph = build_tandem(hops, 1.0)
    comms = [Commodity(0, 0, ((hops, UtilitySpec(1.0)),))]
    sim = PriceSim(graph, comms, PolicyConfig(seed=5, x_max=1.0),
                   fixed_means={(hops, 0): a})
    acc = NetRateAccumulator(sim.sys.link_pairs, [0], window=slots, period=slots)
    for _ in range(slots):
        acc.accumulate(sim.step())
    snap = snapshot_net_rates(acc, FULL_HISTORY)
    violations = check_assumption2(snap, sim.mean_prices(), rate_threshold=1e-3)
    assert violations == []
