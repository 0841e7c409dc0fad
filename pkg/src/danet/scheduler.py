"""Token-regulated delay-aware scheduler and the standalone token-count process.

Per bidirectional link (n, j) the scheduler keeps one token counter per
commodity and direction; the merged count M = m_nj + m_jn competes for the
link: the commodity with the largest M - c wins if that margin is positive,
ties broken by lowest commodity index. A winning link emits exactly c
departures, padding with dummy packets when its queue runs short, and the
active-direction counter drops by c. Arrivals of a slot are enqueued after
service, each packet routed independently to a next-hop queue with
probability proportional to the snapshot net rate.

Queue items are treated duck-typed: the engine increments ``item.hops`` on a
traversal and hands delivered items back to the caller, so the packet class
lives with the metrics layer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .bp import NetIndex
from .errors import ConfigError, RoutingHoleError
from .routing import NetRateSnapshot

RATE_GRID = 2**24  # token rates are floored to this dyadic grid


class ArrivalEstimator:
    """Cumulative running mean of per-node per-commodity real packet arrivals."""

    def __init__(self, num_nodes: int, num_comms: int):
        self.sums = np.zeros((num_nodes, num_comms))
        self.count = 0

    def observe(self, arrivals: np.ndarray) -> None:
        self.sums += arrivals
        self.count += 1

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.sums)
        return self.sums / self.count


def split_arrival(batch: int, rates: dict, rng) -> dict:
    """Assign each of ``batch`` packets to a neighbor w.p. rate / sum(rates)."""
    items = [(j, r) for j, r in rates.items() if r > 0]
    if not items:
        raise RoutingHoleError("no positive-rate next hop for this batch")
    total = sum(r for _, r in items)
    cum = np.cumsum([r / total for _, r in items])
    counts = {j: 0 for j, _ in items}
    for _ in range(batch):
        k = int(np.searchsorted(cum, rng.random(), side="right"))
        k = min(k, len(items) - 1)
        counts[items[k][0]] += 1
    return counts


@dataclass
class TokenRateTable:
    """Validated token generation rates per (link, direction, commodity)."""

    S: np.ndarray
    delta: float
    link_sums: np.ndarray  # total token rate per bidirectional link

    @property
    def active(self) -> np.ndarray:
        return self.S > 0


def token_base_rates(
    est: np.ndarray,
    snapshot: NetRateSnapshot,
    sys: NetIndex,
    mask: np.ndarray,
) -> np.ndarray:
    """E[A_n] * (r_hat share among retained out-edges), zero off the mask."""
    rates = np.where(mask, snapshot.rhat, 0.0)
    out_total = np.zeros((sys.num_nodes, sys.num_comms))
    np.add.at(out_total, (sys.li,), rates[:, 0, :])
    np.add.at(out_total, (sys.lj,), rates[:, 1, :])
    base = np.zeros_like(rates)
    for direction, senders in ((0, sys.li), (1, sys.lj)):
        tot = out_total[senders]
        share = np.divide(rates[:, direction, :], tot, out=np.zeros_like(tot), where=tot > 0)
        base[:, direction, :] = np.where(mask[:, direction, :], est[senders] * share, 0.0)
    return base


def finalize_token_rates(
    base: np.ndarray,
    delta: float,
    mask: np.ndarray,
    caps: np.ndarray,
    link_pairs,
) -> TokenRateTable:
    """Add the surplus, quantize, and validate per-link capacity.

    The dyadic grid keeps every token add/subtract exact in double
    precision, so the departures = inflow + dM identity carries no rounding
    drift. Raises ConfigError naming the worst link if any bidirectional
    link's total token rate reaches its capacity.
    """
    if delta <= 0:
        raise ConfigError(f"token surplus delta must be strictly positive, got {delta}")
    S = np.where(mask, base + delta, 0.0)
    S = np.floor(S * RATE_GRID) / RATE_GRID
    S = np.where(mask, np.maximum(S, 1.0 / RATE_GRID), 0.0)
    link_sums = S.sum(axis=(1, 2))
    over = np.nonzero(link_sums >= caps)[0]
    if over.size:
        worst = over[np.argmax(link_sums[over] - caps[over])]
        raise ConfigError(
            f"token rates on link {link_pairs[worst]} sum to "
            f"{link_sums[worst]:.6f} >= capacity {caps[worst]:.6f}"
        )
    return TokenRateTable(S=S, delta=delta, link_sums=link_sums)


def token_rates(
    estimator: ArrivalEstimator | np.ndarray,
    snapshot: NetRateSnapshot,
    delta: float,
    sys: NetIndex,
    retained_mask: np.ndarray | None = None,
    caps: np.ndarray | None = None,
) -> TokenRateTable:
    """S = E[A] * (r_hat share among retained out-edges) + delta, per counter."""
    if snapshot.links != sys.link_pairs or snapshot.comm_ids != sys.comm_ids:
        raise ValueError("snapshot is not aligned with this network index")
    est = estimator.mean() if isinstance(estimator, ArrivalEstimator) else np.asarray(estimator)
    if caps is None:
        caps = sys.cap
    mask = retained_mask if retained_mask is not None else snapshot.rhat > 0
    base = token_base_rates(est, snapshot, sys, mask)
    return finalize_token_rates(base, delta, mask, caps, sys.link_pairs)


@dataclass
class SplitTable:
    """Smooth weighted round-robin over one (node, commodity)'s next hops.

    The credit counters realize the token-based splitting the service
    discipline pairs naturally with: every packet adds each hop's share to
    its credit, the largest credit wins and pays one packet. Deviation from
    the share proportions stays bounded by one packet per hop, so regulator
    queues see near-deterministic arrivals.
    """

    shares: np.ndarray
    links: np.ndarray  # link index per choice
    dirs: np.ndarray  # direction per choice
    receivers: np.ndarray  # receiving node index per choice
    credits: np.ndarray | None = None

    def pick(self) -> int:
        if self.credits is None:
            self.credits = np.zeros_like(self.shares)
        self.credits += self.shares
        k = int(self.credits.argmax())
        self.credits[k] -= 1.0
        return k


def build_split_tables(
    sys: NetIndex, retained_mask: np.ndarray, rates: np.ndarray
) -> dict[tuple[int, int], SplitTable]:
    """Per (node, commodity) routing tables over retained out-edges."""
    tables: dict[tuple[int, int], SplitTable] = {}
    per_node: dict[tuple[int, int], list] = {}
    for l in range(sys.num_links):
        for direction in (0, 1):
            sender, receiver = sys.endpoints(l, direction)
            for d in range(sys.num_comms):
                if retained_mask[l, direction, d]:
                    per_node.setdefault((sender, d), []).append(
                        (rates[l, direction, d], l, direction, receiver)
                    )
    for key, choices in per_node.items():
        weights = np.array([c[0] for c in choices])
        tables[key] = SplitTable(
            shares=weights / weights.sum(),
            links=np.array([c[1] for c in choices], dtype=np.intp),
            dirs=np.array([c[2] for c in choices], dtype=np.int8),
            receivers=np.array([c[3] for c in choices], dtype=np.intp),
        )
    return tables


@dataclass
class SlotResult:
    delivered: list  # (packet, commodity index) pairs
    real_departures: int
    dummy_departures: int


class SchedulerState:
    """Regulator queues, token bank, and arrival estimator for one network."""

    def __init__(self, sys: NetIndex, caps: np.ndarray | None = None):
        self.sys = sys
        self.caps = sys.cap if caps is None else caps
        shape = (sys.num_links, 2, sys.num_comms)
        self.m = np.zeros(shape)
        self.cum_inflow = np.zeros(shape)
        self.cum_departures = np.zeros(shape)
        self.qlen = np.zeros(shape, dtype=np.int64)
        self.queues: dict[tuple[int, int, int], deque] = {}
        self.holding: dict[tuple[int, int], deque] = {}
        self.rates: TokenRateTable | None = None
        self.split: dict[tuple[int, int], SplitTable] = {}
        self.estimator = ArrivalEstimator(sys.num_nodes, sys.num_comms)
        self.slot = 0
        self.in_network = 0
        self.token_region_violations = 0
        self.max_token_ratio = 0.0
        self._region_bound = (sys.num_comms + 1) * self.caps

    def install(self, rates: TokenRateTable, split_tables) -> None:
        """Adopt new token rates and routes; re-split any held packets."""
        self.rates = rates
        self.split = split_tables
        for key in list(self.holding):
            if key in self.split and self.holding[key]:
                held = self.holding.pop(key)
                for pkt in held:
                    self._route(key[0], key[1], pkt)

    def _route(self, node: int, d: int, pkt) -> None:
        tbl = self.split.get((node, d))
        if tbl is None:
            self.holding.setdefault((node, d), deque()).append(pkt)
            return
        k = tbl.pick()
        key = (int(tbl.links[k]), int(tbl.dirs[k]), d)
        self.queues.setdefault(key, deque()).append(pkt)
        self.qlen[key] += 1

    def step(self, admissions, slot: int | None = None) -> SlotResult:
        """One slot: token growth, service, then arrival splitting.

        ``admissions`` is an iterable of (node index, commodity index, packet).
        """
        sys = self.sys
        delivered = []
        pool = []
        real = dummy = 0
        arr_counts = np.zeros((sys.num_nodes, sys.num_comms))
        if self.rates is not None:
            self.m += self.rates.S
            self.cum_inflow += self.rates.S
            M = self.m.sum(axis=1)
            heads = M.argmax(axis=1)
            rows = np.arange(sys.num_links)
            margin = M[rows, heads] - self.caps
            for l in np.nonzero(margin > 0)[0]:
                d = int(heads[l])
                direction = 0 if self.m[l, 0, d] >= self.m[l, 1, d] else 1
                sender, receiver = sys.endpoints(l, direction)
                cap = self.caps[l]
                quota = int(cap)
                q = self.queues.get((l, direction, d))
                moved = 0
                while q and moved < quota:
                    pkt = q.popleft()
                    pkt.hops += 1
                    moved += 1
                    if receiver == sys.dest[d]:
                        delivered.append((pkt, d))
                        self.in_network -= 1
                    else:
                        pool.append((int(receiver), d, pkt))
                if moved:
                    self.qlen[l, direction, d] -= moved
                    arr_counts[receiver, d] += moved
                real += moved
                dummy += quota - moved
                self.m[l, direction, d] -= cap
                self.cum_departures[l, direction, d] += cap
            link_tokens = self.m.sum(axis=(1, 2))
            ratio = float((link_tokens / self._region_bound).max())
            self.max_token_ratio = max(self.max_token_ratio, ratio)
            if ratio >= 1.0:
                self.token_region_violations += 1
        for node, d, pkt in admissions:
            arr_counts[node, d] += 1
            pool.append((node, d, pkt))
            self.in_network += 1
        self.estimator.observe(arr_counts)
        for node, d, pkt in pool:
            self._route(node, d, pkt)
        self.slot = (self.slot + 1) if slot is None else slot + 1
        return SlotResult(delivered, real, dummy)

    def held_count(self) -> int:
        return sum(len(q) for q in self.holding.values())

    def queued_count(self) -> int:
        return int(self.qlen.sum())

    def conservation_error(self) -> float:
        """Max |cum departures - (cum token inflow - M)| over all counters."""
        return float(np.abs(self.cum_departures - (self.cum_inflow - self.m)).max())


class QueueTraceRecorder:
    """Per-slot queue-length and token-count traces for diagnostics.

    Feed it the scheduler state once per slot; write_csv emits one row per
    (slot, sender, receiver, commodity) with the queue length and merged
    token count.
    """

    def __init__(self, sys: NetIndex):
        self.sys = sys
        self.slots: list[int] = []
        self.qlen: list[np.ndarray] = []
        self.tokens: list[np.ndarray] = []

    def record(self, state: "SchedulerState") -> None:
        self.slots.append(state.slot)
        self.qlen.append(state.qlen.copy())
        self.tokens.append(state.m.copy())

    def write_csv(self, path: str) -> None:
        import csv

        sys = self.sys
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["slot", "from", "to", "commodity", "queue_len", "tokens"])
            for slot, qlen, m in zip(self.slots, self.qlen, self.tokens):
                for l in range(sys.num_links):
                    for direction in (0, 1):
                        s, r = sys.endpoints(l, direction)
                        for d in range(sys.num_comms):
                            q = qlen[l, direction, d]
                            tok = m[l, direction, d]
                            if q == 0 and tok == 0:
                                continue
                            w.writerow([
                                slot,
                                sys.node_ids[s],
                                sys.node_ids[r],
                                sys.comm_ids[d],
                                int(q),
                                f"{tok:.9g}",
                            ])


@dataclass
class TokenTrajectory:
    entry_slot: int  # first slot with sum(M) < (n+1) c_th; -1 if never
    stayed: bool  # no exit from the region after entry, up to the horizon
    bound: float
    final: np.ndarray
    trajectory: np.ndarray | None = None


def token_process_run(
    nu, c_th: float, m0, horizon: int, keep_trajectory: bool = False
) -> TokenTrajectory:
    """Simulate the single-server token count process and audit its region.

    Dynamics: all counters grow by nu each slot; the unique argmax counter
    exceeding c_th (if any) is served c_th. Requires sum(nu) < c_th.
    """
    nu = np.asarray(nu, dtype=float)
    m = np.asarray(m0, dtype=float).copy()
    if nu.ndim != 1 or nu.shape != m.shape:
        raise ValueError("nu and M0 must be 1-d vectors of equal length")
    if np.any(nu <= 0):
        raise ValueError("token generation rates must be positive")
    if nu.sum() >= c_th:
        raise ValueError(
            f"token process requires sum(nu) < c_th; got {nu.sum():.6f} >= {c_th}"
        )
    n = len(nu)
    bound = (n + 1) * c_th
    traj = [m.copy()] if keep_trajectory else None
    entry = 0 if m.sum() < bound else -1
    stayed = True
    for t in range(1, horizon + 1):
        m += nu
        j = int(m.argmax())
        if m[j] > c_th:
            m[j] -= c_th
        if keep_trajectory:
            traj.append(m.copy())
        inside = m.sum() < bound
        if inside and entry < 0:
            entry = t
        elif not inside and entry >= 0:
            stayed = False
    return TokenTrajectory(
        entry_slot=entry,
        stayed=stayed,
        bound=bound,
        final=m,
        trajectory=np.array(traj) if keep_trajectory else None,
    )


def token_process_batch(nus, c_ths, m0s, horizon: int, n_counters=None):
    """Vectorized token-count processes (rows padded with zero-rate counters).

    Returns (entry_slots, stayed) arrays. ``n_counters`` gives each row's true
    dimension for its region bound; padded counters hold zero rate and zero
    initial count, which never win service and never affect sums.
    """
    nus = np.asarray(nus, dtype=float)
    m = np.asarray(m0s, dtype=float).copy()
    c_ths = np.broadcast_to(np.asarray(c_ths, dtype=float), (nus.shape[0],)).copy()
    if n_counters is None:
        n_counters = np.full(nus.shape[0], nus.shape[1])
    n_counters = np.asarray(n_counters)
    if np.any(nus.sum(axis=1) >= c_ths):
        raise ValueError("token process requires sum(nu) < c_th in every instance")
    bound = (n_counters + 1) * c_ths
    rows = np.arange(nus.shape[0])
    entry = np.where(m.sum(axis=1) < bound, 0, -1)
    stayed = np.ones(nus.shape[0], dtype=bool)
    for t in range(1, horizon + 1):
        m += nus
        j = m.argmax(axis=1)
        mx = m[rows, j]
        fire = mx > c_ths
        m[rows[fire], j[fire]] -= c_ths[fire]
        inside = m.sum(axis=1) < bound
        newly = inside & (entry < 0)
        entry[newly] = t
        stayed &= inside | (entry < 0)
    return entry, stayed
