"""Three-layer delay-aware policy: virtual DTBP, net-rate mapping, token scheduler.

Layer 1 runs DTBP price counters on capacities c - epsilon and hands its
realized admissions to layer 3 slot by slot. Layer 2 accumulates layer-1
grants and, at period boundaries, freezes a moving-window net-rate snapshot,
thresholds it into per-commodity subgraphs, verifies loop-freeness, and
rebuilds token rates; a snapshot that fails any gate is discarded and the
previous one stays in force. Layer 3 moves real packets through regulator
queues on the full capacities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bp import DTBP, NetIndex, PolicyConfig, PriceSim
from .errors import ConfigError
from .harness import (
    Metrics,
    Packet,
    RunRecord,
    stability_window_for,
    verdict_from_window_sums,
)
from .netmodel import Commodity, NetworkGraph
from .routing import (
    MOVING_WINDOW,
    CommoditySubgraph,
    NetRateAccumulator,
    check_loop_free,
    snapshot_net_rates,
)
from .scheduler import (
    SchedulerState,
    build_split_tables,
    finalize_token_rates,
)

AUTO_DELTA_HEADROOM = 0.8


@dataclass(frozen=True)
class CrossLayerConfig:
    epsilon: float = 0.05
    delta: float | None = None  # None: sized from per-link headroom at each snapshot
    window: int = 5000
    period: int = 5000
    K: float = 200.0
    x_max: float = 5.0
    seed: int = 0
    threshold: float = 5e-3  # absolute net-rate retention floor
    noise_z: float = 6.0  # significance multiple over the churn noise floor
    token_warmup: int | None = None  # default max(window, 1000)

    @classmethod
    def from_policy(cls, policy: dict, seed: int) -> "CrossLayerConfig":
        return cls(
            epsilon=policy.get("epsilon", 0.05),
            delta=policy.get("delta"),
            window=policy.get("window", 5000),
            period=policy.get("period", 5000),
            K=policy.get("K", 200.0),
            x_max=policy.get("x_max", 5.0),
            seed=seed,
            threshold=policy.get("threshold", 5e-3),
            noise_z=policy.get("noise_z", 6.0),
            token_warmup=policy.get("token_warmup"),
        )


@dataclass
class SnapshotEvent:
    slot: int
    installed: bool
    reason: str
    h_max: int | None = None
    delta: float | None = None
    delta_bound: float | None = None


class CrossLayerRun:
    """Lock-step execution of the three layers, one slot per step()."""

    def __init__(
        self,
        graph: NetworkGraph,
        commodities: list[Commodity],
        config: CrossLayerConfig,
    ):
        min_cap = min(graph.capacity.values())
        if not 0 < config.epsilon < min_cap:
            raise ConfigError(
                f"epsilon must be in (0, {min_cap}) for this graph, got {config.epsilon}"
            )
        if config.window < 1 or config.period < 1:
            raise ConfigError("window and period must be positive")
        n_comm = len(commodities)
        if config.delta is not None:
            if config.delta <= 0:
                raise ConfigError(f"delta must be positive, got {config.delta}")
            if config.delta >= config.epsilon / n_comm:
                raise ConfigError(
                    f"delta={config.delta} cannot be guaranteed feasible: needs "
                    f"delta < epsilon/|D| = {config.epsilon / n_comm:.6g}"
                )
        self.config = config
        self.sys = NetIndex(graph, commodities)
        self.layer1 = PriceSim(
            graph,
            commodities,
            PolicyConfig(K=config.K, x_max=config.x_max, variant=DTBP, seed=config.seed),
            capacity_offset=config.epsilon,
        )
        self.acc = NetRateAccumulator(
            self.sys.link_pairs, self.sys.comm_ids, config.window, config.period
        )
        self.sched = SchedulerState(self.sys)
        self.token_warmup = (
            config.token_warmup
            if config.token_warmup is not None
            else max(config.window, 1000)
        )
        self.snapshot = None
        self.retained_mask = None
        self.subgraphs: dict[int, CommoditySubgraph] = {}
        self.certificates: dict[int, object] = {}
        self.h_max: int | None = None
        self.current_delta: float | None = None
        self.snapshot_log: list[SnapshotEvent] = []
        self.admit_sums = np.zeros((self.sys.num_nodes, self.sys.num_comms))
        # ring of per-slot admissions so the arrival estimate covers the same
        # window as the net-rate snapshot (a cumulative mean would keep the
        # startup burst forever and overstate token rates)
        self._admit_ring = np.zeros(
            (config.window, self.sys.num_nodes, self.sys.num_comms)
        )
        self.admit_window_sum = np.zeros((self.sys.num_nodes, self.sys.num_comms))
        self._next_id = 0
        self.cum_injected = 0
        self.cum_layer1_admissions = 0

    # -------------------------------------------------------------- snapshots

    def _repair_mask(self, mask_d: np.ndarray, rhat_d: np.ndarray, ci: int) -> np.ndarray:
        """Re-add the largest positive-net-rate out-edge of any node that has
        retained inflow (or is a source) but no retained outflow."""
        sys = self.sys
        dest = sys.dest[ci]
        must_flow = {n for n, c, _ in sys.sources if c == ci}
        changed = True
        while changed:
            changed = False
            has_out = set()
            has_in = set()
            for l in range(sys.num_links):
                for direction in (0, 1):
                    if mask_d[l, direction]:
                        s, r = sys.endpoints(l, direction)
                        has_out.add(int(s))
                        has_in.add(int(r))
            for n in sorted(must_flow | has_in):
                if n == dest or n in has_out:
                    continue
                best = None
                for l, direction in sys.out_links[n]:
                    r = rhat_d[l, direction]
                    if r > 0 and not mask_d[l, direction]:
                        if best is None or r > best[0]:
                            best = (r, l, direction)
                if best is not None:
                    mask_d[best[1], best[2]] = True
                    changed = True
        return mask_d

    def _edge_loads(self, tables, admit_rate, certs) -> np.ndarray:
        """Fluid load per retained directed edge under the given split tables.

        Admissions are pushed through the shares in topological order, so the
        loads include the traffic that share renormalization moves onto
        retained edges; sizing token rates from one-hop net-rate inflow would
        under-serve every node downstream of a pruned edge.
        """
        sys = self.sys
        edge_loads = np.zeros((sys.num_links, 2, sys.num_comms))
        loads = admit_rate.copy()
        for ci, cid in enumerate(sys.comm_ids):
            for nid in certs[cid].order:
                n = sys.nidx[nid]
                tbl = tables.get((n, ci))
                if tbl is None:
                    continue
                supply = loads[n, ci]
                if supply <= 0:
                    continue
                for k in range(len(tbl.shares)):
                    extra = supply * tbl.shares[k]
                    edge_loads[tbl.links[k], tbl.dirs[k], ci] += extra
                    loads[int(tbl.receivers[k]), ci] += extra
        return edge_loads

    def _subgraph_from_mask(self, mask_d: np.ndarray, rhat_d: np.ndarray, cid: int):
        edges, rates = [], {}
        for l, (i, j) in enumerate(self.sys.link_pairs):
            if mask_d[l, 0]:
                edges.append((i, j))
                rates[(i, j)] = float(rhat_d[l, 0])
            if mask_d[l, 1]:
                edges.append((j, i))
                rates[(j, i)] = float(rhat_d[l, 1])
        return CommoditySubgraph(commodity=cid, edges=edges, rates=rates)

    def _refresh(self, slot: int) -> None:
        sys = self.sys
        snap = snapshot_net_rates(self.acc, MOVING_WINDOW)
        floor = np.maximum(self.config.threshold, snap.noise_floor(self.config.noise_z))
        mask = snap.rhat > floor[:, None, :]
        if self.retained_mask is not None:
            # exit hysteresis: an installed edge survives until its net rate
            # falls below half the retention floor, so borderline edges do
            # not flap the route set (every flap re-splits queues)
            mask |= self.retained_mask & (snap.rhat > 0.5 * floor[:, None, :])
        subs, certs = {}, {}
        for ci, cid in enumerate(sys.comm_ids):
            mask[:, :, ci] = self._repair_mask(mask[:, :, ci], snap.rhat[:, :, ci], ci)
            sub = self._subgraph_from_mask(mask[:, :, ci], snap.rhat[:, :, ci], cid)
            cert = check_loop_free(sub)
            if not cert.acyclic:
                self.snapshot_log.append(
                    SnapshotEvent(slot, False, f"cycle {cert.cycle} in commodity {cid}")
                )
                return
            subs[cid], certs[cid] = sub, cert
        h_max = max((c.longest_path for c in certs.values()), default=0)
        window_seen = min(self.layer1.slot, self.config.window)
        admit_rate = self.admit_window_sum / max(window_seen, 1)
        # A startup burst (admissions at x_max while prices ramp) can push the
        # windowed admission estimate above anything the virtual layer could
        # ship; at a pure source the retained net outflow is what was actually
        # carried, and the go-forward rate cannot exceed it.
        rates_masked = np.where(mask, snap.rhat, 0.0)
        out_rhat = np.zeros((sys.num_nodes, sys.num_comms))
        in_rhat = np.zeros((sys.num_nodes, sys.num_comms))
        np.add.at(out_rhat, (sys.li,), rates_masked[:, 0, :])
        np.add.at(out_rhat, (sys.lj,), rates_masked[:, 1, :])
        np.add.at(in_rhat, (sys.lj,), rates_masked[:, 0, :])
        np.add.at(in_rhat, (sys.li,), rates_masked[:, 1, :])
        pure_source = in_rhat <= 1e-12
        admit_rate = np.where(
            pure_source & (out_rhat > 0), np.minimum(admit_rate, out_rhat), admit_rate
        )
        # An unchanged route set keeps its split tables (and their round-robin
        # phases): token rates are resized to the drifted loads, but queue
        # compositions stay put, so no re-equilibration transient is kicked
        # off. Routes are rebuilt only when the retained edge set changes.
        keep_routes = self.retained_mask is not None and np.array_equal(
            mask, self.retained_mask
        )
        if keep_routes:
            tables = self.sched.split
        else:
            tables = build_split_tables(sys, mask, np.where(mask, snap.rhat, 0.0))
        edge_loads = self._edge_loads(tables, admit_rate, certs)
        delta = self.config.delta
        if delta is None:
            counters = mask.sum(axis=(1, 2))
            active = counters > 0
            if not active.any():
                delta = self.config.epsilon / (2 * sys.num_comms)
            else:
                headroom = self.sys.cap[active] - edge_loads.sum(axis=(1, 2))[active]
                delta = AUTO_DELTA_HEADROOM * float(
                    (headroom / counters[active]).min()
                )
            if delta <= 0:
                self.snapshot_log.append(
                    SnapshotEvent(slot, False, "no token-rate headroom")
                )
                return
        try:
            table = finalize_token_rates(edge_loads, delta, mask, sys.cap, sys.link_pairs)
        except ConfigError as exc:
            self.snapshot_log.append(SnapshotEvent(slot, False, str(exc)))
            return
        self.sched.install(table, tables)
        self.snapshot = snap
        self.retained_mask = mask
        self.subgraphs = subs
        self.certificates = certs
        self.h_max = h_max
        self.current_delta = delta
        bound = (
            self.config.epsilon / (h_max * sys.num_comms) if h_max else math.inf
        )
        self.snapshot_log.append(
            SnapshotEvent(
                slot,
                True,
                "rates resized on held routes" if keep_routes else "installed",
                h_max,
                delta,
                bound,
            )
        )

    # ------------------------------------------------------------------ slots

    def step(self):
        """One lock-step slot of all three layers; returns (slot, admissions, result)."""
        t = self.layer1.slot
        trace = self.layer1.step()
        self.acc.accumulate(trace)
        if (
            t > 0
            and t % self.config.period == 0
            and t >= self.token_warmup
            and self.acc.count >= self.config.window
        ):
            self._refresh(t)
        self.admit_sums += trace.arrivals
        pos = t % self.config.window
        self.admit_window_sum += trace.arrivals - self._admit_ring[pos]
        self._admit_ring[pos] = trace.arrivals
        admissions = []
        # Real packets flow once routes exist. Injecting during the pre-route
        # window would build a held backlog of about window * x packets that a
        # rate-regulated server (margin delta per queue) cannot clear within
        # any practical horizon; layer 1 alone covers that phase.
        if self.snapshot is not None:
            self.cum_layer1_admissions += int(trace.arrivals.sum())
            for ni, ci, _ in self.sys.sources:
                cnt = int(trace.arrivals[ni, ci])
                cid = self.sys.comm_ids[ci]
                nid = self.sys.node_ids[ni]
                for _ in range(cnt):
                    admissions.append((ni, ci, Packet(self._next_id, cid, nid, t)))
                    self._next_id += 1
            self.cum_injected += len(admissions)
        result = self.sched.step(admissions)
        return t, admissions, result

    def snapshot_failures(self) -> list[SnapshotEvent]:
        return [e for e in self.snapshot_log if not e.installed]


def run(
    config: CrossLayerConfig,
    graph: NetworkGraph,
    commodities: list[Commodity],
    slots: int,
    warmup: int = 0,
    config_echo: dict | None = None,
    stability_window: int | None = None,
) -> RunRecord:
    """Execute the cross-layer policy and collect the harness record."""
    clr = CrossLayerRun(graph, commodities, config)
    sys = clr.sys
    metrics = Metrics(warmup, sys.comm_ids)
    measured = max(slots - warmup, 1)
    swin = stability_window or stability_window_for(slots, warmup)
    n_windows = (slots - warmup) // swin
    shape = sys.num_links * 2 * sys.num_comms
    window_sums = np.zeros((n_windows, shape))
    qsum = np.zeros((sys.num_links, 2, sys.num_comms))
    for t in range(slots):
        _, admissions, result = clr.step()
        for _, _, pkt in admissions:
            metrics.on_admit(pkt)
        for pkt, _ in result.delivered:
            metrics.on_deliver(pkt, t)
        assert metrics.admitted_all == metrics.delivered_all + clr.sched.in_network
        if t >= warmup:
            w = (t - warmup) // swin
            if w < n_windows:
                window_sums[w] += clr.sched.qlen.ravel()
            qsum += clr.sched.qlen
    names = [
        f"{sys.node_ids[s]}->{sys.node_ids[r]}:{sys.comm_ids[d]}"
        for l in range(sys.num_links)
        for direction in (0, 1)
        for d in range(sys.num_comms)
        for s, r in [sys.endpoints(l, direction)]
    ]
    verdict = verdict_from_window_sums(window_sums, swin, names)
    queue_means = []
    flat = qsum.ravel()
    for k in np.nonzero(flat > 0)[0]:
        l, rem = divmod(int(k), 2 * sys.num_comms)
        direction, d = divmod(rem, sys.num_comms)
        s, r = sys.endpoints(l, direction)
        queue_means.append(
            (sys.node_ids[s], sys.node_ids[r], sys.comm_ids[d], flat[k] / measured)
        )
    admitted_rate = {}
    for (s, cid), cnt in metrics.admitted_sd.items():
        dest = next(c.destination for c in commodities if c.id == cid)
        admitted_rate[f"{s}->{dest}"] = cnt / measured
    return RunRecord(
        policy="crosslayer",
        seed=config.seed,
        config=config_echo or {},
        slots=slots,
        warmup=warmup,
        admitted=metrics.admitted,
        delivered=metrics.delivered,
        admitted_rate=admitted_rate,
        delay_hist=metrics.delay,
        hop_hist=metrics.hops,
        queue_means=queue_means,
        net_rates=clr.snapshot.to_rows() if clr.snapshot is not None else None,
        stability=verdict,
        conservation={
            "admitted": metrics.admitted_all,
            "delivered": metrics.delivered_all,
            "in_network": clr.sched.in_network,
            "held": clr.sched.held_count(),
        },
    )
