"""Scenarios, packet-level metrics, stability checks, persistence, and sweeps.

Under plain DTBP / min-resource the price table is realized as actual
per-node per-commodity FIFO packet queues: decisions read queue lengths,
grants move head-of-line packets, and dummy grants move nothing, so
end-to-end delay and hop counts are measurable. Metrics cover the cohort of
packets born at or after the warm-up slot; conservation counters cover the
whole run.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import bp
from .errors import ConfigError, NotReadyError
from .netmodel import Commodity, NetworkGraph, UtilitySpec, build_grid, build_tandem
from .routing import NetRateAccumulator, snapshot_net_rates

DEFAULT_STABILITY_WINDOW = 1000
DEFAULT_DRIFT_TOLERANCE = 0.05
DEFAULT_DRIFT_SLACK = 0.5  # packets; about one sigma of windowed-mean noise
                           # for regulated queues, far below real divergence
STABILITY_WINDOWS_PER_RUN = 4


def stability_window_for(slots: int, warmup: int) -> int:
    """Verdict window for run records: a few smooth windows over the
    post-warmup era, so one bursty thousand-slot stretch in one of hundreds
    of queues does not masquerade as drift."""
    return max(1, (slots - warmup) // STABILITY_WINDOWS_PER_RUN)


@dataclass(eq=True)
class Packet:
    """Traceable unit of traffic; dummies never become Packets."""

    id: int
    commodity: int
    source: int
    birth: int
    hops: int = 0
    delivered_slot: int | None = None


@dataclass
class StabilityVerdict:
    series: dict[str, list[float]]
    stable: bool
    max_windowed_mean: float
    unstable_queues: list[str] = field(default_factory=list)


def _series_stable(means: list[float], tol: float, slack: float) -> bool:
    """Final window vs. the peak of all earlier windows, with an absolute
    allowance so sub-packet means cannot trip the relative rule."""
    if len(means) < 2:
        return True
    peak = max(means[:-1])
    return means[-1] <= peak * (1.0 + tol) + slack


def stability_check(
    traces,
    window: int,
    drift_tolerance: float = DEFAULT_DRIFT_TOLERANCE,
    drift_slack: float = DEFAULT_DRIFT_SLACK,
) -> StabilityVerdict:
    """Windowed-mean growth audit of per-queue length traces.

    ``traces`` is a mapping name -> per-slot lengths (a bare sequence is
    treated as one queue). Each trace must be longer than two windows.
    """
    if not isinstance(traces, dict):
        traces = {"queue": traces}
    series = {}
    for name, trace in traces.items():
        arr = np.asarray(trace, dtype=float)
        if arr.size <= 2 * window:
            raise NotReadyError(
                f"trace {name!r} has {arr.size} slots; need more than {2 * window}"
            )
        n_win = arr.size // window
        means = arr[: n_win * window].reshape(n_win, window).mean(axis=1)
        series[name] = [float(v) for v in means]
    unstable = [
        n for n, m in series.items()
        if not _series_stable(m, drift_tolerance, drift_slack)
    ]
    peak = max((max(m) for m in series.values()), default=0.0)
    return StabilityVerdict(
        series=series,
        stable=not unstable,
        max_windowed_mean=peak,
        unstable_queues=unstable,
    )


def verdict_from_window_sums(
    window_sums: np.ndarray,
    window: int,
    names: list[str],
    drift_tolerance: float = DEFAULT_DRIFT_TOLERANCE,
    drift_slack: float = DEFAULT_DRIFT_SLACK,
) -> StabilityVerdict:
    """Same rule as stability_check, fed by pre-accumulated window sums.

    ``window_sums`` has shape (num_windows, num_queues); only complete
    windows should be included.
    """
    means = window_sums / window
    series = {names[k]: [float(v) for v in means[:, k]] for k in range(len(names))}
    unstable = [
        n for n, m in series.items()
        if not _series_stable(m, drift_tolerance, drift_slack)
    ]
    peak = float(means.max()) if means.size else 0.0
    return StabilityVerdict(
        series=series,
        stable=not unstable,
        max_windowed_mean=peak,
        unstable_queues=unstable,
    )


@dataclass
class RunRecord:
    policy: str
    seed: int
    config: dict
    slots: int
    warmup: int
    admitted: dict[int, int]
    delivered: dict[int, int]
    admitted_rate: dict[str, float]
    delay_hist: dict[int, dict[int, int]]
    hop_hist: dict[int, dict[int, int]]
    queue_means: list[tuple]
    net_rates: list[tuple] | None
    stability: StabilityVerdict | None
    conservation: dict

    def mean_delay(self, commodity: int | None = None) -> float:
        total = count = 0
        for cid, hist in self.delay_hist.items():
            if commodity is not None and cid != commodity:
                continue
            for d, n in hist.items():
                total += d * n
                count += n
        return total / count if count else math.nan

    def delay_variance(self, commodity: int | None = None) -> float:
        mean = self.mean_delay(commodity)
        if math.isnan(mean):
            return math.nan
        tot = cnt = 0.0
        for cid, hist in self.delay_hist.items():
            if commodity is not None and cid != commodity:
                continue
            for d, n in hist.items():
                tot += n * (d - mean) ** 2
                cnt += n
        return tot / cnt if cnt else math.nan

    def hops_above(self, limit: int) -> int:
        return sum(
            n for hist in self.hop_hist.values() for h, n in hist.items() if h > limit
        )

    def delivered_total(self) -> int:
        return sum(self.delivered.values())


class Metrics:
    """Cohort histograms plus run-wide conservation counters."""

    def __init__(self, warmup: int, comm_ids: list[int]):
        self.warmup = warmup
        self.delay = {cid: {} for cid in comm_ids}
        self.hops = {cid: {} for cid in comm_ids}
        self.admitted = {cid: 0 for cid in comm_ids}
        self.delivered = {cid: 0 for cid in comm_ids}
        self.admitted_sd = {}
        self.admitted_all = 0
        self.delivered_all = 0

    def on_admit(self, packet: Packet) -> None:
        self.admitted_all += 1
        if packet.birth >= self.warmup:
            self.admitted[packet.commodity] += 1
            key = (packet.source, packet.commodity)
            self.admitted_sd[key] = self.admitted_sd.get(key, 0) + 1

    def on_deliver(self, packet: Packet, slot: int) -> None:
        packet.delivered_slot = slot
        self.delivered_all += 1
        if packet.birth >= self.warmup:
            cid = packet.commodity
            self.delivered[cid] += 1
            delay = slot - packet.birth
            self.delay[cid][delay] = self.delay[cid].get(delay, 0) + 1
            self.hops[cid][packet.hops] = self.hops[cid].get(packet.hops, 0) + 1


@dataclass
class ScenarioConfig:
    topology: dict
    commodities: list[dict]
    policy: dict
    slots: int = 30000
    warmup: int = 10000
    seed: int = 0

    POLICY_KINDS = ("dtbp", "min_resource", "crosslayer")

    def validate(self) -> None:
        kind = self.topology.get("kind")
        if kind not in ("grid", "tandem", "explicit"):
            raise ConfigError(f"topology.kind must be grid|tandem|explicit, got {kind!r}")
        if self.policy.get("kind") not in self.POLICY_KINDS:
            raise ConfigError(
                f"policy.kind must be one of {self.POLICY_KINDS}, got {self.policy.get('kind')!r}"
            )
        if not self.commodities:
            raise ConfigError("at least one commodity row is required")
        if self.slots <= self.warmup or self.warmup < 0:
            raise ConfigError(
                f"need slots > warmup >= 0, got slots={self.slots} warmup={self.warmup}"
            )
        graph = self.build_graph()
        for row in self.commodities:
            for side in ("src", "dst"):
                if row[side] not in graph.neighbors:
                    raise ConfigError(f"commodity node {row[side]} not in topology")
            if row["src"] == row["dst"]:
                raise ConfigError(f"commodity src == dst == {row['src']}")
            if row.get("weight", 1.0) <= 0:
                raise ConfigError("commodity weight must be positive")

    def build_graph(self) -> NetworkGraph:
        t = self.topology
        if t["kind"] == "grid":
            return build_grid(t["side"], t.get("capacity", 1.0))
        if t["kind"] == "tandem":
            return build_tandem(t["hops"], t.get("capacity", 1.0))
        return NetworkGraph(t["nodes"], [tuple(l) for l in t["links"]])

    def build_commodities(self) -> list[Commodity]:
        """One commodity per distinct destination, id in order of appearance."""
        by_dest: dict[int, list] = {}
        order: list[int] = []
        for row in self.commodities:
            if row["dst"] not in by_dest:
                by_dest[row["dst"]] = []
                order.append(row["dst"])
            by_dest[row["dst"]].append(
                (row["src"], UtilitySpec(row.get("weight", 1.0)))
            )
        return [
            Commodity(id=k, destination=dst, sources=tuple(by_dest[dst]))
            for k, dst in enumerate(order)
        ]

    def to_dict(self) -> dict:
        return {
            "topology": self.topology,
            "commodities": self.commodities,
            "policy": self.policy,
            "slots": self.slots,
            "warmup": self.warmup,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        cfg = cls(
            topology=d["topology"],
            commodities=d["commodities"],
            policy=d["policy"],
            slots=d.get("slots", 30000),
            warmup=d.get("warmup", 10000),
            seed=d.get("seed", 0),
        )
        cfg.validate()
        return cfg


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as f:
        return ScenarioConfig.from_dict(json.load(f))


def _policy_config(policy: dict, seed: int) -> bp.PolicyConfig:
    variant = bp.MIN_RESOURCE if policy["kind"] == "min_resource" else bp.DTBP
    return bp.PolicyConfig(
        K=policy.get("K", 200.0),
        x_max=policy.get("x_max", 5.0),
        variant=variant,
        M=policy.get("M", 3.0) if variant == bp.MIN_RESOURCE else 0.0,
        seed=seed,
    )


def run_scenario(config: ScenarioConfig) -> RunRecord:
    config.validate()
    graph = config.build_graph()
    commodities = config.build_commodities()
    kind = config.policy["kind"]
    if kind in ("dtbp", "min_resource"):
        return _run_packet_bp(graph, commodities, config)
    from .crosslayer import CrossLayerConfig, run as crosslayer_run

    cl = CrossLayerConfig.from_policy(config.policy, config.seed)
    return crosslayer_run(cl, graph, commodities, config.slots, config.warmup,
                          config_echo=config.to_dict())


def _run_packet_bp(
    graph: NetworkGraph, commodities: list[Commodity], config: ScenarioConfig
) -> RunRecord:
    """DTBP / min-resource with prices realized as physical FIFO packet queues."""
    pcfg = _policy_config(config.policy, config.seed)
    sys = bp.NetIndex(graph, commodities)
    arrival_rng, tie_rng, _ = bp.rng_streams(config.seed)
    n, D = sys.num_nodes, sys.num_comms
    prices = np.zeros((n, D))
    queues: dict[tuple[int, int], deque] = {}
    metrics = Metrics(config.warmup, sys.comm_ids)
    acc = NetRateAccumulator(
        sys.link_pairs, sys.comm_ids,
        window=min(config.policy.get("window", 5000), config.slots),
        period=config.policy.get("period", 5000),
    )
    swin = config.policy.get(
        "stability_window", stability_window_for(config.slots, config.warmup)
    )
    n_windows = (config.slots - config.warmup) // swin
    window_sums = np.zeros((n_windows, n, D))
    qsum = np.zeros((n, D))
    next_id = 0
    in_network = 0
    measured = config.slots - config.warmup

    for t in range(config.slots):
        means = np.zeros((n, D))
        arrivals = np.zeros((n, D))
        for ni, ci, util in sys.sources:
            means[ni, ci] = bp.flow_control_mean(prices[ni, ci], util, pcfg)
            arrivals[ni, ci] = bp.sample_arrival(means[ni, ci], arrival_rng)
        dec = bp.decide_links(prices, sys, pcfg, tie_rng)
        staged: list[tuple[int, int, Packet]] = []
        out_cnt = np.zeros((n, D))
        in_cnt = np.zeros((n, D))
        for k in range(len(dec)):
            s, r = int(dec.sender[k]), int(dec.receiver[k])
            d = int(dec.comm[k])
            q = queues.get((s, d))
            quota = int(dec.rate[k])
            moved = 0
            while q and moved < quota:
                pkt = q.popleft()
                pkt.hops += 1
                moved += 1
                if r == sys.dest[d]:
                    metrics.on_deliver(pkt, t)
                    in_network -= 1
                else:
                    staged.append((r, d, pkt))
                    in_cnt[r, d] += 1
            out_cnt[s, d] += moved
        for r, d, pkt in staged:
            queues.setdefault((r, d), deque()).append(pkt)
        for ni, ci, _ in sys.sources:
            cid = sys.comm_ids[ci]
            for _ in range(int(arrivals[ni, ci])):
                pkt = Packet(next_id, cid, sys.node_ids[ni], t)
                next_id += 1
                in_network += 1
                metrics.on_admit(pkt)
                queues.setdefault((ni, ci), deque()).append(pkt)
        prices = prices - out_cnt + in_cnt + arrivals
        prices[sys.dest, np.arange(D)] = 0.0
        acc.accumulate(bp.SlotTrace(t, dec, arrivals, means))
        if t >= config.warmup:
            w = (t - config.warmup) // swin
            if w < n_windows:
                window_sums[w] += prices
            qsum += prices

    for (ni, ci), q in queues.items():
        assert len(q) == int(prices[ni, ci]), "price/queue mismatch"
    assert metrics.admitted_all == metrics.delivered_all + in_network

    names = [
        f"{sys.node_ids[ni]}:{sys.comm_ids[ci]}" for ni in range(n) for ci in range(D)
    ]
    verdict = verdict_from_window_sums(
        window_sums.reshape(n_windows, n * D), swin, names
    )
    queue_means = [
        (sys.node_ids[ni], None, sys.comm_ids[ci], qsum[ni, ci] / measured)
        for ni in range(n)
        for ci in range(D)
        if qsum[ni, ci] > 0
    ]
    try:
        net_rows = snapshot_net_rates(acc, "full").to_rows()
    except NotReadyError:
        net_rows = None
    admitted_rate = {
        f"{s}->{next(c.destination for c in commodities if c.id == cid)}":
            cnt / measured
        for (s, cid), cnt in metrics.admitted_sd.items()
    }
    return RunRecord(
        policy=config.policy["kind"],
        seed=config.seed,
        config=config.to_dict(),
        slots=config.slots,
        warmup=config.warmup,
        admitted=metrics.admitted,
        delivered=metrics.delivered,
        admitted_rate=admitted_rate,
        delay_hist=metrics.delay,
        hop_hist=metrics.hops,
        queue_means=queue_means,
        net_rates=net_rows,
        stability=verdict,
        conservation={
            "admitted": metrics.admitted_all,
            "delivered": metrics.delivered_all,
            "in_network": in_network,
            "held": 0,
        },
    )


def sweep_k(base: ScenarioConfig, k_values) -> list[tuple[str, float, float]]:
    """Mean end-to-end delay per (policy, K) for DTBP and CrossLayer.

    Every run shares the base scenario's seed so arrival randomness is common.
    """
    ks = list(k_values)
    if len(ks) < 2:
        raise ValueError("sweep_k needs at least 2 K values")
    rows = []
    for kind in ("dtbp", "crosslayer"):
        for K in ks:
            cfg = ScenarioConfig.from_dict(base.to_dict())
            cfg.policy = dict(cfg.policy, kind=kind, K=K)
            record = run_scenario(cfg)
            rows.append((kind, float(K), record.mean_delay()))
    return rows


# ---------------------------------------------------------------- persistence

def _verdict_to_dict(v: StabilityVerdict | None):
    if v is None:
        return None
    return {
        "series": v.series,
        "stable": v.stable,
        "max_windowed_mean": v.max_windowed_mean,
        "unstable_queues": v.unstable_queues,
    }

def _verdict_from_dict(d) -> StabilityVerdict | None:
    if d is None:
        return None
    return StabilityVerdict(
        series=d["series"],
        stable=d["stable"],
        max_windowed_mean=d["max_windowed_mean"],
        unstable_queues=d["unstable_queues"],
    )


def record_to_dict(record: RunRecord) -> dict:
    return {
        "policy": record.policy,
        "seed": record.seed,
        "config": record.config,
        "slots": record.slots,
        "warmup": record.warmup,
        "admitted": {str(k): v for k, v in record.admitted.items()},
        "delivered": {str(k): v for k, v in record.delivered.items()},
        "admitted_rate": record.admitted_rate,
        "delay_hist": {
            str(c): {str(d): n for d, n in h.items()}
            for c, h in record.delay_hist.items()
        },
        "hop_hist": {
            str(c): {str(d): n for d, n in h.items()}
            for c, h in record.hop_hist.items()
        },
        "queue_means": [list(row) for row in record.queue_means],
        "net_rates": [list(r) for r in record.net_rates] if record.net_rates is not None else None,
        "stability": _verdict_to_dict(record.stability),
        "conservation": record.conservation,
    }


def record_from_dict(d: dict) -> RunRecord:
    return RunRecord(
        policy=d["policy"],
        seed=d["seed"],
        config=d["config"],
        slots=d["slots"],
        warmup=d["warmup"],
        admitted={int(k): v for k, v in d["admitted"].items()},
        delivered={int(k): v for k, v in d["delivered"].items()},
        admitted_rate=d["admitted_rate"],
        delay_hist={
            int(c): {int(k): v for k, v in h.items()}
            for c, h in d["delay_hist"].items()
        },
        hop_hist={
            int(c): {int(k): v for k, v in h.items()}
            for c, h in d["hop_hist"].items()
        },
        queue_means=[tuple(row) for row in d["queue_means"]],
        net_rates=[tuple(r) for r in d["net_rates"]] if d["net_rates"] is not None else None,
        stability=_verdict_from_dict(d["stability"]),
        conservation=d["conservation"],
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def export(record: RunRecord, path: str, format: str = "json") -> None:
    """JSON: one self-contained file. CSV: a directory of schema tables plus
    record.json so a re-import reproduces the record exactly."""
    if format == "json":
        with open(path, "w") as f:
            json.dump(record_to_dict(record), f, indent=1, sort_keys=True)
        return
    if format != "csv":
        raise ValueError(f"unknown export format {format!r}")
    os.makedirs(path, exist_ok=True)
    _write_csv(
        os.path.join(path, "delays.csv"),
        ["commodity", "delay_slots", "count"],
        [
            (c, d, n)
            for c, h in sorted(record.delay_hist.items())
            for d, n in sorted(h.items())
        ],
    )
    _write_csv(
        os.path.join(path, "hops.csv"),
        ["commodity", "hops", "count"],
        [
            (c, d, n)
            for c, h in sorted(record.hop_hist.items())
            for d, n in sorted(h.items())
        ],
    )
    _write_csv(
        os.path.join(path, "queues.csv"),
        ["node", "neighbor", "commodity", "mean_len"],
        [
            (node, "" if nb is None else nb, c, f"{m:.9g}")
            for node, nb, c, m in record.queue_means
        ],
    )
    if record.net_rates is not None:
        _write_csv(
            os.path.join(path, "netrates.csv"),
            ["commodity", "from", "to", "r_hat"],
            [(c, i, j, f"{r:.9g}") for c, i, j, r in record.net_rates],
        )
    with open(os.path.join(path, "record.json"), "w") as f:
        json.dump(record_to_dict(record), f, indent=1, sort_keys=True)


def load_record(path: str) -> RunRecord:
    if os.path.isdir(path):
        path = os.path.join(path, "record.json")
    with open(path) as f:
        return record_from_dict(json.load(f))


def export_ksweep(rows, path: str) -> None:
    _write_csv(path, ["policy", "K", "mean_delay"], [
        (p, f"{k:g}", f"{d:.9g}") for p, k, d in rows
    ])
