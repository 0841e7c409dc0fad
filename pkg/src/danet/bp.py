"""Discrete-time back-pressure engine (price layer) and its min-resource variant.

Slot semantics, in order: (1) flow-control means are computed from the
start-of-slot prices and integer arrivals are sampled; (2) every bidirectional
link grants its full capacity to the commodity with the largest absolute
price differential (minus the offset M under min-resource), in the direction
of decreasing price, only if the winning weight is strictly positive, with
uniform-random choice among exact ties; (3) prices update as
P' = (P - out)^+ + X + in, with destination rows pinned to zero. Inbound
grants are credited in full at the receiver, so granted service on an empty
queue moves dummy packets that still count toward downstream price growth;
that is the process the tandem Markov analysis describes.

Prices here are counters, not packet queues; the harness owns the
real-packet realization used for delay measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netmodel import Commodity, NetworkGraph, UtilitySpec

DTBP = "dtbp"
MIN_RESOURCE = "min_resource"


@dataclass(frozen=True)
class PolicyConfig:
    K: float = 200.0
    x_max: float = 1.0
    variant: str = DTBP
    M: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.K <= 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if self.x_max <= 0:
            raise ValueError(f"x_max must be positive, got {self.x_max}")
        if self.M < 0:
            raise ValueError(f"M must be nonnegative, got {self.M}")
        if self.variant not in (DTBP, MIN_RESOURCE):
            raise ValueError(f"unknown variant {self.variant!r}")


def rng_streams(seed: int):
    """Independent generators for (arrivals, link tie-breaks, packet splitting).

    Keeping arrivals on their own stream lets different policies share one
    arrival sample path under a common seed.
    """
    ss = np.random.SeedSequence(seed)
    arr, tie, split = ss.spawn(3)
    return (
        np.random.default_rng(arr),
        np.random.default_rng(tie),
        np.random.default_rng(split),
    )


def flow_control_mean(price: float, utility: UtilitySpec, config: PolicyConfig) -> float:
    """min(U'^{-1}(price / K), x_max); a zero price maps to the cap."""
    return min(utility.marginal_inverse(price / config.K), config.x_max)


def sample_arrival(mean: float, rng) -> int:
    """floor(mean) + Bernoulli(frac(mean)); expectation equals mean exactly."""
    if mean < 0:
        raise ValueError(f"arrival mean must be nonnegative, got {mean}")
    base = math.floor(mean)
    frac = mean - base
    if frac > 0.0 and rng.random() < frac:
        base += 1
    return base


class NetIndex:
    """Array view of a graph + commodity set: the shared index space for engines.

    Links are listed in canonical (i < j) order; direction 0 means i -> j.
    """

    def __init__(self, graph: NetworkGraph, commodities: list[Commodity]):
        self.graph = graph
        self.commodities = list(commodities)
        self.node_ids = list(graph.nodes)
        self.nidx = {n: k for k, n in enumerate(self.node_ids)}
        self.link_pairs = list(graph.links)
        self.lidx = {p: k for k, p in enumerate(self.link_pairs)}
        self.li = np.array([self.nidx[i] for i, j in self.link_pairs], dtype=np.intp)
        self.lj = np.array([self.nidx[j] for i, j in self.link_pairs], dtype=np.intp)
        self.cap = np.array([graph.capacity[p] for p in self.link_pairs])
        self.comm_ids = [c.id for c in self.commodities]
        self.cidx = {cid: k for k, cid in enumerate(self.comm_ids)}
        self.dest = np.array(
            [self.nidx[c.destination] for c in self.commodities], dtype=np.intp
        )
        self.sources = [
            (self.nidx[s], k, util)
            for k, c in enumerate(self.commodities)
            for s, util in c.sources
        ]
        # out_links[n] -> list of (link index, direction) leaving node n
        self.out_links = [[] for _ in self.node_ids]
        for l, (i, j) in enumerate(self.link_pairs):
            self.out_links[self.nidx[i]].append((l, 0))
            self.out_links[self.nidx[j]].append((l, 1))

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_links(self) -> int:
        return len(self.link_pairs)

    @property
    def num_comms(self) -> int:
        return len(self.commodities)

    def endpoints(self, link: int, direction: int) -> tuple[int, int]:
        """(sender, receiver) node indexes of a directed link."""
        a, b = self.li[link], self.lj[link]
        return (a, b) if direction == 0 else (b, a)


@dataclass
class LinkDecisions:
    """Per-slot grants: parallel arrays over the links that transmit."""

    link: np.ndarray
    comm: np.ndarray
    direction: np.ndarray  # 0: i->j, 1: j->i (canonical i < j)
    sender: np.ndarray
    receiver: np.ndarray
    rate: np.ndarray

    def __len__(self):
        return len(self.link)


@dataclass
class SlotTrace:
    slot: int
    decisions: LinkDecisions
    arrivals: np.ndarray  # (num_nodes, num_comms) integer counts
    means: np.ndarray  # conditional means behind the arrivals


def decide_links(
    prices: np.ndarray, sys: NetIndex, config: PolicyConfig, tie_rng, cap=None
) -> LinkDecisions:
    """Winner commodity, direction, and grant for every bidirectional link.

    Weight is |P_i - P_j| (minus M under min-resource); exact ties are broken
    uniformly at random; a link transmits its full capacity only if the
    winning weight is strictly positive.
    """
    if cap is None:
        cap = sys.cap
    diff = prices[sys.li] - prices[sys.lj]
    w = np.abs(diff)
    if config.variant == MIN_RESOURCE:
        w = w - config.M
    wmax = w.max(axis=1)
    noise = tie_rng.random(w.shape)
    d_star = np.where(w == wmax[:, None], noise, -1.0).argmax(axis=1)
    act = np.nonzero(wmax > 0.0)[0]
    d = d_star[act]
    direction = (diff[act, d] < 0).astype(np.int8)
    sender = np.where(direction == 0, sys.li[act], sys.lj[act])
    receiver = np.where(direction == 0, sys.lj[act], sys.li[act])
    return LinkDecisions(act, d, direction, sender, receiver, cap[act])


def price_step(
    prices: np.ndarray, dec: LinkDecisions, arrivals: np.ndarray, sys: NetIndex
) -> np.ndarray:
    """P' = (P - out)^+ + X + in, destinations pinned at zero."""
    out = np.zeros_like(prices)
    inb = np.zeros_like(prices)
    np.add.at(out, (dec.sender, dec.comm), dec.rate)
    np.add.at(inb, (dec.receiver, dec.comm), dec.rate)
    nxt = np.maximum(prices - out, 0.0) + arrivals + inb
    nxt[sys.dest, np.arange(sys.num_comms)] = 0.0
    return nxt


class PriceSim:
    """DTBP / min-resource price counters advanced one slot at a time.

    ``fixed_means`` overrides the flow controller with open-loop arrival
    means per (source node id, commodity id) — the tandem analyses fix
    Bernoulli(a) arrivals with no flow control. ``capacity_offset`` runs the
    same policy on capacities c - offset (the cross-layer virtual layer).
    """

    def __init__(
        self,
        graph: NetworkGraph,
        commodities: list[Commodity],
        config: PolicyConfig,
        fixed_means: dict[tuple[int, int], float] | None = None,
        capacity_offset: float = 0.0,
    ):
        self.sys = NetIndex(graph, commodities)
        self.config = config
        self.cap = self.sys.cap - capacity_offset
        if np.any(self.cap <= 0):
            raise ValueError("capacity offset leaves a non-positive link capacity")
        self.arrival_rng, self.tie_rng, _ = rng_streams(config.seed)
        self.prices = np.zeros((self.sys.num_nodes, self.sys.num_comms))
        self.slot = 0
        self.price_sum = np.zeros_like(self.prices)
        self._fixed = {}
        if fixed_means:
            for (s, cid), mean in fixed_means.items():
                if mean < 0:
                    raise ValueError("fixed arrival mean must be nonnegative")
                self._fixed[(self.sys.nidx[s], self.sys.cidx[cid])] = float(mean)

    def _arrival_means(self) -> np.ndarray:
        means = np.zeros_like(self.prices)
        for n, c, util in self.sys.sources:
            fixed = self._fixed.get((n, c))
            if fixed is not None:
                means[n, c] = fixed
            else:
                means[n, c] = flow_control_mean(self.prices[n, c], util, self.config)
        return means

    def step(self) -> SlotTrace:
        means = self._arrival_means()
        arrivals = np.zeros_like(self.prices)
        for n, c, _ in self.sys.sources:
            arrivals[n, c] = sample_arrival(means[n, c], self.arrival_rng)
        dec = decide_links(self.prices, self.sys, self.config, self.tie_rng, self.cap)
        self.price_sum += self.prices
        trace = SlotTrace(self.slot, dec, arrivals, means)
        self.prices = price_step(self.prices, dec, arrivals, self.sys)
        self.slot += 1
        return trace

    def mean_prices(self) -> dict[tuple[int, int], float]:
        """Running time-average price per (node id, commodity id)."""
        if self.slot == 0:
            return {}
        avg = self.price_sum / self.slot
        return {
            (nid, cid): avg[ni, ci]
            for ni, nid in enumerate(self.sys.node_ids)
            for ci, cid in enumerate(self.sys.comm_ids)
        }


def tandem_step(prices: list[int], arrival: int) -> list[int]:
    """One DTBP slot on a unit-capacity tandem with a single commodity.

    ``prices[0]`` is the destination (always 0), ``prices[-1]`` the source.
    This is the exact transition the Markov-chain oracle enumerates and the
    long tandem simulations iterate; backward transmissions happen whenever
    a downstream price exceeds an upstream one.
    """
    n = len(prices) - 1
    out = [0] * (n + 1)
    inb = [0] * (n + 1)
    prev = 0
    for i in range(1, n + 1):
        cur = prices[i]
        if cur > prev:
            out[i] += 1
            inb[i - 1] += 1
        elif prev > cur:
            out[i - 1] += 1
            inb[i] += 1
        prev = cur
    nxt = [0] * (n + 1)
    for i in range(1, n + 1):
        v = prices[i] - out[i]
        if v < 0:
            v = 0
        nxt[i] = v + inb[i]
    nxt[n] += arrival
    return nxt


@dataclass
class TandemRunResult:
    hops: int
    a: float
    slots: int
    means: np.ndarray  # mean queue length, nodes 1..n
    stderr: np.ndarray  # batch-means standard error per node
    max_abs_diff: int  # max over slots/pairs of |P_i - P_{i-1}|, intermediate pairs
    max_source_gap: int  # max over slots of P_{n-1} - P_n
    envelope_violations: int
    trajectory: np.ndarray | None = None


def simulate_tandem(
    hops: int,
    a: float,
    slots: int,
    seed: int = 0,
    batches: int = 20,
    keep_trajectory: bool = False,
) -> TandemRunResult:
    """Long Bernoulli(a) tandem run with batch-means errors and envelope audit.

    The envelope audit counts slots where |P_i - P_{i-1}| > 3 for an
    intermediate pair or P_{n-1} - P_n > 3 at the source pair.
    """
    if not 0 < a < 1:
        raise ValueError(f"arrival probability must be in (0,1), got {a}")
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    arrival_rng, _, _ = rng_streams(seed)
    bits = (arrival_rng.random(slots) < a).astype(np.int8)
    traj = np.empty((slots, hops + 1), dtype=np.int32)
    p = [0] * (hops + 1)
    step = tandem_step
    for t in range(slots):
        traj[t] = p
        p = step(p, int(bits[t]))
    diffs = traj[:, 1:] - traj[:, :-1]
    inter = np.abs(diffs[:, : hops - 1]) if hops > 1 else np.zeros((slots, 0))
    src_gap = -diffs[:, hops - 1]
    violations = int((inter > 3).sum() + (src_gap > 3).sum())
    q = traj[:, 1:].astype(float)
    means = q.mean(axis=0)
    usable = (slots // batches) * batches
    bm = q[:usable].reshape(batches, usable // batches, hops).mean(axis=1)
    stderr = bm.std(axis=0, ddof=1) / math.sqrt(batches)
    return TandemRunResult(
        hops=hops,
        a=a,
        slots=slots,
        means=means,
        stderr=stderr,
        max_abs_diff=int(np.abs(diffs[:, : max(hops - 1, 0)]).max()) if hops > 1 else 0,
        max_source_gap=int(src_gap.max()),
        envelope_violations=violations,
        trajectory=traj if keep_trajectory else None,
    )
