import math
from dataclasses import dataclass

import numpy as np
import pytest

from danet import (
    ArrivalEstimator,
    Commodity,
    ConfigError,
    NetIndex,
    RoutingHoleError,
    SchedulerState,
    UtilitySpec,
    build_tandem,
    split_arrival,
    token_process_run,
    token_rates,
)
from danet.netmodel import NetworkGraph
from danet.routing import NetRateSnapshot
from danet.scheduler import (
    SplitTable,
    TokenRateTable,
    build_split_tables,
    token_process_batch,
)
from danet.verify import entry_bound, random_token_instances


@dataclass
class FakePacket:
    id: int
    hops: int = 0


def test_split_arrival_probabilities():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = split_arrival(n, {"j1": 0.6, "j2": 0.2}, rng)
    # shares 0.75 / 0.25
    se = 3 * math.sqrt(0.75 * 0.25 / n)
    assert abs(counts["j1"] / n - 0.75) < se
    assert abs(counts["j2"] / n - 0.25) < se


def test_split_arrival_single_neighbor():
    rng = np.random.default_rng(1)
    counts = split_arrival(50, {"j": 0.4, "dead": 0.0}, rng)
    assert counts == {"j": 50}


def test_split_arrival_routing_hole():
    rng = np.random.default_rng(2)
    with pytest.raises(RoutingHoleError):
        split_arrival(3, {"j": 0.0}, rng)


def test_split_arrival_monte_carlo_million():
    rng = np.random.default_rng(3)
    n = 1_000_000
    counts = split_arrival(n, {"a": 0.75, "b": 0.25}, rng)
    assert abs(counts["a"] / n - 0.75) < 3 * math.sqrt(0.75 * 0.25 / n)


def three_node_line():
    """Nodes 0-1-2; commodities 0 (dest 2) and 1 (dest 0)."""
    graph = NetworkGraph([0, 1, 2], [(0, 1, 1.0), (1, 2, 1.0)])
    comms = [
        Commodity(0, 2, ((0, UtilitySpec(1.0)),)),
        Commodity(1, 0, ((2, UtilitySpec(1.0)),)),
    ]
    return NetIndex(graph, comms)


def snapshot_for(sys, rates):
    """rates: dict[(i, j, comm_index)] -> net rate."""
    rhat = np.zeros((sys.num_links, 2, sys.num_comms))
    gross = np.zeros((sys.num_links, sys.num_comms))
    for (i, j, d), v in rates.items():
        key = (i, j) if i < j else (j, i)
        l = sys.lidx[key]
        rhat[l, 0 if i < j else 1, d] = v
        gross[l, d] += v
    return NetRateSnapshot(
        links=sys.link_pairs, comm_ids=sys.comm_ids, rhat=rhat, gross=gross,
        mode="moving", slot=0, window_slots=1000,
    )


def test_token_rates_example():
    # E[A] = 0.8, shares 0.75 / 0.25, delta = 0.01 -> S = 0.61 and 0.21
    graph = NetworkGraph([0, 1, 2], [(0, 1, 1.0), (0, 2, 1.0)])
    comms = [Commodity(0, 9, ((0, UtilitySpec(1.0)),))] if False else [
        Commodity(0, 1, ((0, UtilitySpec(1.0)),)),
    ]
    # commodity 0 destined to node 1; node 0 splits 0.6 / 0.2 to nodes 1, 2
    sys = NetIndex(graph, comms)
    snap = snapshot_for(sys, {(0, 1, 0): 0.6, (0, 2, 0): 0.2})
    est = np.zeros((3, 1))
    est[0, 0] = 0.8
    table = token_rates(est, snap, 0.01, sys)
    l01, l02 = sys.lidx[(0, 1)], sys.lidx[(0, 2)]
    assert table.S[l01, 0, 0] == pytest.approx(0.61, abs=1e-6)
    assert table.S[l02, 0, 0] == pytest.approx(0.21, abs=1e-6)


def test_token_rates_delta_validation():
    sys = three_node_line()
    snap = snapshot_for(sys, {(0, 1, 0): 0.5})
    with pytest.raises(ConfigError):
        token_rates(np.zeros((3, 2)), snap, 0.0, sys)


def test_token_rates_capacity_validation_names_link():
    sys = three_node_line()
    snap = snapshot_for(sys, {(0, 1, 0): 0.6, (1, 0, 1): 0.5})
    est = np.zeros((3, 2))
    est[0, 0] = 0.6
    est[1, 1] = 0.5
    with pytest.raises(ConfigError, match=r"\(0, 1\)"):
        token_rates(est, snap, 0.01, sys)


def manual_state(sys):
    state = SchedulerState(sys)
    shape = (sys.num_links, 2, sys.num_comms)
    state.rates = TokenRateTable(
        S=np.zeros(shape), delta=0.0, link_sums=np.zeros(sys.num_links)
    )
    return state


def test_scheduler_slot_winner_and_decrement():
    sys = three_node_line()
    state = manual_state(sys)
    l01 = sys.lidx[(0, 1)]
    state.m[l01, 0, 0] = 1.4
    state.m[l01, 1, 1] = 0.9
    q = state.queues.setdefault((l01, 0, 0), __import__("collections").deque())
    pkt = FakePacket(1)
    q.append(pkt)
    state.qlen[l01, 0, 0] = 1
    state.in_network = 1
    res = state.step([])
    assert res.real_departures == 1 and res.dummy_departures == 0
    assert state.m[l01, 0, 0] == pytest.approx(0.4)
    assert state.m[l01, 1, 1] == pytest.approx(0.9)  # loser untouched
    assert pkt.hops == 1


def test_scheduler_slot_no_service_below_threshold():
    sys = three_node_line()
    state = manual_state(sys)
    l01 = sys.lidx[(0, 1)]
    state.m[l01, 0, 0] = 1.0  # equals capacity: margin not strictly positive
    state.m[l01, 1, 1] = 0.7
    res = state.step([])
    assert res.real_departures == 0 and res.dummy_departures == 0
    assert state.m[l01, 0, 0] == 1.0


def test_scheduler_slot_empty_queue_sends_dummy():
    sys = three_node_line()
    state = manual_state(sys)
    l01 = sys.lidx[(0, 1)]
    state.m[l01, 0, 0] = 1.4
    res = state.step([])
    assert res.real_departures == 0 and res.dummy_departures == 1
    assert state.m[l01, 0, 0] == pytest.approx(0.4)
    assert state.cum_departures[l01, 0, 0] == 1.0


def test_scheduler_fifo_order():
    sys = three_node_line()
    state = manual_state(sys)
    l01 = sys.lidx[(0, 1)]
    import collections

    q = state.queues.setdefault((l01, 0, 0), collections.deque())
    pkts = [FakePacket(i) for i in range(5)]
    q.extend(pkts)
    state.qlen[l01, 0, 0] = 5
    state.in_network = 5
    served = []
    for _ in range(5):
        state.m[l01, 0, 0] = 1.5
        res = state.step([])
        served.extend(p.id for p, _ in res.delivered)
    # commodity 0's destination is node 2, so these go to the pool, not
    # delivered; check fifo via remaining queue order instead
    assert [p.id for p in q] == []
    assert served == []  # nothing delivered on this hop


def test_scheduler_delivery_at_destination():
    sys = three_node_line()
    state = manual_state(sys)
    l12 = sys.lidx[(1, 2)]
    import collections

    q = state.queues.setdefault((l12, 0, 0), collections.deque())
    pkt = FakePacket(7)
    q.append(pkt)
    state.qlen[l12, 0, 0] = 1
    state.in_network = 1
    state.m[l12, 0, 0] = 1.2
    res = state.step([])
    assert [p.id for p, _ in res.delivered] == [7]
    assert state.in_network == 0


def test_scheduler_holding_buffer_and_flush():
    sys = three_node_line()
    state = manual_state(sys)
    pkt = FakePacket(3)
    state.step([(0, 0, pkt)])  # no split table yet -> held
    assert state.held_count() == 1
    rates = state.rates
    mask = np.zeros((sys.num_links, 2, sys.num_comms), dtype=bool)
    l01 = sys.lidx[(0, 1)]
    mask[l01, 0, 0] = True
    weights = np.zeros_like(mask, dtype=float)
    weights[l01, 0, 0] = 1.0
    tables = build_split_tables(sys, mask, weights)
    state.install(rates, tables)
    assert state.held_count() == 0
    assert state.qlen[l01, 0, 0] == 1


def test_token_conservation_exact_over_random_run():
    sys = three_node_line()
    state = SchedulerState(sys)
    shape = (sys.num_links, 2, sys.num_comms)
    S = np.zeros(shape)
    l01, l12 = sys.lidx[(0, 1)], sys.lidx[(1, 2)]
    S[l01, 0, 0] = 0.4375  # dyadic
    S[l12, 0, 0] = 0.5
    S[l01, 1, 1] = 0.25
    state.rates = TokenRateTable(S=S, delta=0.01, link_sums=S.sum(axis=(1, 2)))
    mask = S > 0
    tables = build_split_tables(sys, mask, S)
    state.split = tables
    next_id = 0
    rng = np.random.default_rng(8)
    for t in range(20000):
        admissions = []
        if rng.random() < 0.42:
            admissions.append((0, 0, FakePacket(next_id)))
            next_id += 1
        if rng.random() < 0.2:
            admissions.append((2, 1, FakePacket(next_id)))
            next_id += 1
        state.step(admissions)
    assert state.conservation_error() == 0.0
    assert state.token_region_violations == 0
    # deviation bound: |cum departures - cum inflow| <= (|D|+1) c per counter
    dev = np.abs(state.cum_departures - state.cum_inflow)
    bound = (sys.num_comms + 1) * sys.cap[:, None, None]
    assert (dev <= bound + 1e-12).all()


def test_smooth_round_robin_split_matches_shares():
    tbl = SplitTable(
        shares=np.array([0.75, 0.25]),
        links=np.array([0, 1]),
        dirs=np.array([0, 0]),
        receivers=np.array([1, 2]),
    )
    picks = [tbl.pick() for _ in range(1000)]
    assert abs(picks.count(0) / 1000 - 0.75) < 0.01
    # bounded deviation: running counts never stray more than 1 from shares
    running = np.zeros(2)
    tbl2 = SplitTable(
        shares=np.array([0.75, 0.25]), links=np.array([0, 1]),
        dirs=np.array([0, 0]), receivers=np.array([1, 2]),
    )
    for k in range(1, 500):
        running[tbl2.pick()] += 1
        assert np.abs(running - k * tbl2.shares).max() <= 1.0


def test_token_process_examples():
    nu = np.array([0.2, 0.3, 0.4])
    res = token_process_run(nu, 1.0, np.array([50.0, 0.0, 0.0]), horizon=2000)
    bound = entry_bound(nu, 1.0, [50.0, 0.0, 0.0])
    # the drift argument bound computed at M[0]; also within the looser
    # variant evaluated one token-arrival later (sum 50.9)
    assert 0 < res.entry_slot <= bound <= math.ceil((50.9 - 4.0) / 0.1)
    assert res.stayed

    res0 = token_process_run(nu, 1.0, np.zeros(3), horizon=500)
    assert res0.entry_slot == 0 and res0.stayed

    with pytest.raises(ValueError):
        token_process_run(np.array([0.5, 0.6]), 1.0, np.zeros(2), horizon=10)


def test_token_process_batch_matches_scalar():
    rng = np.random.default_rng(11)
    instances = random_token_instances(20, rng)
    n_max = max(len(nu) for nu, _, _ in instances)
    nus = np.zeros((len(instances), n_max))
    m0s = np.zeros_like(nus)
    c_ths = np.zeros(len(instances))
    n_true = np.zeros(len(instances), dtype=int)
    for k, (nu, c_th, m0) in enumerate(instances):
        nus[k, : len(nu)] = nu
        m0s[k, : len(nu)] = m0
        c_ths[k] = c_th
        n_true[k] = len(nu)
    horizon = 3000
    entry, stayed = token_process_batch(nus, c_ths, m0s, horizon, n_counters=n_true)
    for k, (nu, c_th, m0) in enumerate(instances):
        res = token_process_run(nu, c_th, m0, horizon)
        assert res.entry_slot == entry[k]
        assert res.stayed == stayed[k]


def test_queue_trace_recorder(tmp_path):
    from danet.scheduler import QueueTraceRecorder

    sys = three_node_line()
    state = manual_state(sys)
    l01 = sys.lidx[(0, 1)]
    rec = QueueTraceRecorder(sys)
    import collections

    state.queues[(l01, 0, 0)] = collections.deque([FakePacket(1)])
    state.qlen[l01, 0, 0] = 1
    state.m[l01, 0, 0] = 1.5
    rec.record(state)
    state.step([])
    rec.record(state)
    path = tmp_path / "trace.csv"
    rec.write_csv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "slot,from,to,commodity,queue_len,tokens"
    assert len(lines) >= 2
