"""Delay-aware net-rate mapping, per-commodity subgraphs, and loop-freeness.

The mapping keeps, per bidirectional link and commodity, only the positive
part of the difference of the two directional average service rates, so at
least one direction of every pair is zero. Applied to a feasible rate point
it preserves feasibility and the objective; applied to accumulated grants it
yields the route snapshot the delay-aware scheduler consumes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .bp import SlotTrace
from .errors import NotReadyError
from .netmodel import RatePoint

FULL_HISTORY = "full"
MOVING_WINDOW = "moving"

DEFAULT_RETENTION_THRESHOLD = 1e-3


class NetRateAccumulator:
    """Windowed + cumulative sums of granted rates per directed link and commodity.

    Grants are accumulated dummy-inclusive, exactly as they appear in the
    price evolution. The ring buffer holds the last ``window`` slots; the
    cumulative sums back the full-history average.
    """

    def __init__(self, links, comm_ids, window: int, period: int):
        if window < 1 or period < 1:
            raise ValueError("window and period must be positive")
        self.links = list(links)
        self.comm_ids = list(comm_ids)
        self.window = window
        self.period = period
        shape = (len(self.links), 2, len(self.comm_ids))
        self._buf = np.zeros((window,) + shape)
        self.window_sum = np.zeros(shape)
        self.cum_sum = np.zeros(shape)
        self.count = 0
        self.last_slot = None

    def accumulate(self, trace: SlotTrace) -> None:
        if self.last_slot is not None and trace.slot != self.last_slot + 1:
            raise ValueError(
                f"out-of-order trace: got slot {trace.slot} after {self.last_slot}"
            )
        dense = np.zeros(self.window_sum.shape)
        dec = trace.decisions
        dense[dec.link, dec.direction, dec.comm] = dec.rate
        pos = self.count % self.window
        self.window_sum += dense - self._buf[pos]
        self._buf[pos] = dense
        self.cum_sum += dense
        self.count += 1
        self.last_slot = trace.slot


@dataclass
class NetRateSnapshot:
    """Frozen net rates r_hat per directed link and commodity.

    ``rhat[l, 0, d]`` is the i->j net rate of canonical link l = (i, j);
    min(rhat[l, 0, d], rhat[l, 1, d]) == 0 by construction. ``gross`` is the
    two-direction average traffic of the pair: balanced churn shows up as
    gross >> net, a genuine route edge as net close to gross.
    """

    links: list[tuple[int, int]]
    comm_ids: list[int]
    rhat: np.ndarray
    gross: np.ndarray
    mode: str
    slot: int | None
    window_slots: int = 0  # slots averaged into this snapshot

    def noise_floor(self, z: float) -> np.ndarray:
        """Per-pair significance floor for net rates.

        Balanced churn makes the windowed net a zero-mean random walk with
        standard deviation ~ sqrt(gross / window); a net below z of that is
        indistinguishable from noise.
        """
        w = max(self.window_slots, 1)
        return z * np.sqrt(np.maximum(self.gross, 0.0) / w)

    def rate(self, i, j, comm_id) -> float:
        key = (i, j) if i < j else (j, i)
        l = self.links.index(key)
        d = self.comm_ids.index(comm_id)
        return float(self.rhat[l, 0 if i < j else 1, d])

    def to_rows(self) -> list[tuple[int, int, int, float]]:
        """(commodity, from, to, r_hat) rows for every positive entry."""
        rows = []
        for l, (i, j) in enumerate(self.links):
            for d, cid in enumerate(self.comm_ids):
                if self.rhat[l, 0, d] > 0:
                    rows.append((cid, i, j, float(self.rhat[l, 0, d])))
                if self.rhat[l, 1, d] > 0:
                    rows.append((cid, j, i, float(self.rhat[l, 1, d])))
        return rows


def snapshot_net_rates(acc: NetRateAccumulator, mode: str = MOVING_WINDOW) -> NetRateSnapshot:
    """Positive part of the directional average difference, per pair.

    Full-history mode averages every accumulated slot; moving mode averages
    the last ``window`` slots and requires at least that much history.
    """
    if mode == FULL_HISTORY:
        if acc.count < 1:
            raise NotReadyError("no slots accumulated")
        avg = acc.cum_sum / acc.count
    elif mode == MOVING_WINDOW:
        if acc.count < acc.window:
            raise NotReadyError(
                f"moving window needs {acc.window} slots, have {acc.count}"
            )
        avg = acc.window_sum / acc.window
    else:
        raise ValueError(f"unknown snapshot mode {mode!r}")
    fw = avg[:, 0, :] - avg[:, 1, :]
    rhat = np.stack([np.maximum(fw, 0.0), np.maximum(-fw, 0.0)], axis=1)
    return NetRateSnapshot(
        links=acc.links,
        comm_ids=acc.comm_ids,
        rhat=rhat,
        gross=avg[:, 0, :] + avg[:, 1, :],
        mode=mode,
        slot=acc.last_slot,
        window_slots=acc.count if mode == FULL_HISTORY else acc.window,
    )


def map_rate_point(point: RatePoint) -> RatePoint:
    """Static form of the mapping: r_hat_ij = (r_ij - r_ji)^+, x unchanged."""
    mapped = RatePoint(x=dict(point.x), r={})
    seen = set()
    for (i, j, d) in point.r:
        key = ((i, j) if i < j else (j, i)) + (d,)
        if key in seen:
            continue
        seen.add(key)
        a, b = key[0], key[1]
        fw = point.r.get((a, b, d), 0.0)
        bw = point.r.get((b, a, d), 0.0)
        mapped.r[(a, b, d)] = max(fw - bw, 0.0)
        mapped.r[(b, a, d)] = max(bw - fw, 0.0)
    return mapped


@dataclass
class CommoditySubgraph:
    """Directed edges a commodity may use: those with net rate above threshold."""

    commodity: int
    edges: list[tuple[int, int]]
    rates: dict[tuple[int, int], float]


def build_subgraph(
    snapshot: NetRateSnapshot,
    commodity: int,
    threshold: float = DEFAULT_RETENTION_THRESHOLD,
) -> CommoditySubgraph:
    if commodity not in snapshot.comm_ids:
        raise ValueError(f"snapshot does not cover commodity {commodity}")
    d = snapshot.comm_ids.index(commodity)
    edges = []
    rates = {}
    for l, (i, j) in enumerate(snapshot.links):
        if snapshot.rhat[l, 0, d] > threshold:
            edges.append((i, j))
            rates[(i, j)] = float(snapshot.rhat[l, 0, d])
        if snapshot.rhat[l, 1, d] > threshold:
            edges.append((j, i))
            rates[(j, i)] = float(snapshot.rhat[l, 1, d])
    return CommoditySubgraph(commodity=commodity, edges=edges, rates=rates)


@dataclass
class AcyclicityCertificate:
    acyclic: bool
    order: list | None  # topological order of nodes appearing in the subgraph
    cycle: list | None  # node sequence, first == last
    longest_path: int  # hops; 0 for an empty subgraph

    @property
    def h(self) -> int:
        return self.longest_path


def check_loop_free(sub: CommoditySubgraph) -> AcyclicityCertificate:
    """Kahn elimination; topological order + longest path, or a concrete cycle."""
    succ: dict = {}
    indeg: dict = {}
    for u, v in sub.edges:
        succ.setdefault(u, []).append(v)
        succ.setdefault(v, [])
        indeg[v] = indeg.get(v, 0) + 1
        indeg.setdefault(u, 0)
    ready = [n for n, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for v in succ[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    if len(order) < len(succ):
        # Every node Kahn could not eliminate keeps a predecessor among the
        # remaining ones, so a backward walk cannot dead-end; the reversed
        # walk is a forward cycle.
        remaining = set(succ) - set(order)
        pred = {n: [] for n in remaining}
        for u, v in sub.edges:
            if u in remaining and v in remaining:
                pred[v].append(u)
        start = min(remaining)
        path, pos = [start], {start: 0}
        while True:
            nxt = min(pred[path[-1]])
            if nxt in pos:
                cycle = (path[pos[nxt]:] + [nxt])[::-1]
                return AcyclicityCertificate(False, None, cycle, 0)
            pos[nxt] = len(path)
            path.append(nxt)
    dist = {n: 0 for n in order}
    for n in order:
        for v in succ[n]:
            if dist[n] + 1 > dist[v]:
                dist[v] = dist[n] + 1
    longest = max(dist.values(), default=0)
    return AcyclicityCertificate(True, order, None, longest)


def check_assumption2(
    snapshot: NetRateSnapshot,
    mean_prices: dict[tuple[int, int], float],
    rate_threshold: float = 0.0,
    tol: float = 1e-9,
) -> list[tuple[int, int, int, float, float, float]]:
    """Directed pairs with positive net rate whose mean prices do not decrease.

    Returns (from, to, commodity, net rate, pbar_from, pbar_to) per violation;
    an empty list supports the assumption on this run.
    """
    violations = []
    for cid, i, j, r in snapshot.to_rows():
        if r <= rate_threshold:
            continue
        pi = mean_prices.get((i, cid), 0.0)
        pj = mean_prices.get((j, cid), 0.0)
        if pj - pi > tol:
            violations.append((i, j, cid, r, pi, pj))
    return violations
