"""Exact Markov analysis of unit-capacity tandems under DTBP with Bernoulli(a) input.

The chain is generated from the simulator's own slot transition
(``bp.tandem_step``) by breadth-first enumeration from the all-zero state, so
the oracle and every long simulation verify the same process. States are
displayed source-first, (P_n, ..., P_1), matching the hand analysis tables;
printed state counts there are compared as diagnostics only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .bp import TandemRunResult, simulate_tandem, tandem_step

MAX_STATES = 1_000_000
ORACLE_TRACTABLE_STATES = 300_000


@dataclass
class TandemChain:
    hops: int
    a: float
    states: list[tuple[int, ...]]  # (P_n, ..., P_1)
    index: dict[tuple[int, ...], int]
    transition: np.ndarray  # row-stochastic

    @property
    def num_states(self) -> int:
        return len(self.states)


@dataclass
class QueueMeans:
    hops: int
    a: float
    pbar: np.ndarray  # pbar[i-1] = stationary mean of node i's queue
    pi: np.ndarray
    residual: float  # max |pi A - pi|

    def of_node(self, i: int) -> float:
        if i == 0:
            return 0.0
        return float(self.pbar[i - 1])


def _state_of(prices: list[int]) -> tuple[int, ...]:
    return tuple(reversed(prices[1:]))


def _prices_of(state: tuple[int, ...]) -> list[int]:
    return [0] + list(reversed(state))


def enumerate_chain(hops: int, a: float, max_states: int = MAX_STATES) -> TandemChain:
    """Reachable states from all-zero under the exact DTBP slot semantics."""
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    if not 0 < a < 1:
        raise ValueError(f"arrival probability must be in (0,1), got {a}")
    zero = tuple([0] * hops)
    index = {zero: 0}
    states = [zero]
    rows = []
    frontier = [zero]
    while frontier:
        nxt_frontier = []
        for s in frontier:
            prices = _prices_of(s)
            succ = []
            for x in (0, 1):
                t = _state_of(tandem_step(prices, x))
                if t not in index:
                    if len(states) >= max_states:
                        raise RuntimeError(
                            f"state enumeration exceeded {max_states} states"
                        )
                    index[t] = len(states)
                    states.append(t)
                    nxt_frontier.append(t)
                succ.append(index[t])
            rows.append((index[s], succ))
        frontier = nxt_frontier
    n = len(states)
    A = np.zeros((n, n))
    b = 1.0 - a
    for i, (j0, j1) in rows:
        A[i, j0] += b
        A[i, j1] += a
    return TandemChain(hops=hops, a=a, states=states, index=index, transition=A)


def stationary(chain: TandemChain) -> QueueMeans:
    """Stationary distribution by dense solve of pi A = pi, sum pi = 1.

    A reducible chain (more than one closed class) is reported as an error.
    """
    A = chain.transition
    n = chain.num_states
    n_comp, labels = connected_components(csr_matrix(A > 0), connection="strong")
    closed = []
    for comp in range(n_comp):
        members = np.nonzero(labels == comp)[0]
        outside = A[np.ix_(members, np.setdiff1d(np.arange(n), members))]
        if outside.size == 0 or outside.sum() == 0:
            closed.append([chain.states[m] for m in members])
    if len(closed) != 1:
        raise RuntimeError(
            f"chain is reducible: {len(closed)} closed classes: "
            + "; ".join(str(c[:4]) for c in closed)
        )
    M = A.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(M, rhs)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.abs(pi @ A - pi).max())
    if residual > 1e-10:
        # fall back to power iteration from the solved point
        for _ in range(200_000):
            nxt = pi @ A
            residual = float(np.abs(nxt - pi).max())
            pi = nxt
            if residual < 1e-12:
                break
        pi /= pi.sum()
        residual = float(np.abs(pi @ A - pi).max())
    S = np.array(chain.states, dtype=float)  # columns: P_n ... P_1
    pbar = (pi[:, None] * S).sum(axis=0)[::-1]  # reorder to node 1 .. node n
    return QueueMeans(hops=chain.hops, a=chain.a, pbar=pbar, pi=pi, residual=residual)


@dataclass
class MonotoneCheck:
    a: float
    method: str  # "oracle" or "simulation"
    means: np.ndarray  # node 1 .. node n
    strict: bool
    envelope_violations: int = 0
    stderr: np.ndarray | None = None


@dataclass
class MonotoneReport:
    hops: int
    checks: list[MonotoneCheck]

    @property
    def all_strict(self) -> bool:
        return all(c.strict for c in self.checks)


def _strictly_increasing(means, slack=0.0) -> bool:
    """Node means must rise from destination side to source: P_1 < P_2 < ..."""
    return all(means[i + 1] - means[i] > slack for i in range(len(means) - 1)) and means[0] > 0


def verify_monotone(
    hops: int,
    a_grid,
    slots: int = 1_000_000,
    seed: int = 0,
    oracle_state_cap: int = ORACLE_TRACTABLE_STATES,
) -> MonotoneReport:
    """Strict source-to-destination queue ordering per grid point.

    Uses the exact oracle where the chain is tractable, otherwise a long
    simulation with 3-sigma batch-means separation; simulation runs also
    audit the queue-differential envelope.
    """
    checks = []
    for k, a in enumerate(a_grid):
        try:
            chain = enumerate_chain(hops, a, max_states=oracle_state_cap)
            oracle_means = stationary(chain).pbar
        except RuntimeError:
            oracle_means = None
        if oracle_means is not None:
            checks.append(
                MonotoneCheck(a, "oracle", oracle_means, _strictly_increasing(oracle_means))
            )
            continue
        sim: TandemRunResult = simulate_tandem(hops, a, slots, seed=seed + k)
        lo = sim.means - 3 * sim.stderr
        hi = sim.means + 3 * sim.stderr
        strict = sim.means[0] - 3 * sim.stderr[0] > 0 and all(
            lo[i + 1] > hi[i] for i in range(hops - 1)
        )
        checks.append(
            MonotoneCheck(
                a, "simulation", sim.means, strict, sim.envelope_violations, sim.stderr
            )
        )
    return MonotoneReport(hops=hops, checks=checks)


def oracle_table(hops: int, a_grid) -> list[tuple[float, ...]]:
    """(a, P_1..P_n) rows for CSV export."""
    rows = []
    for a in a_grid:
        qm = stationary(enumerate_chain(hops, a))
        rows.append((float(a), *[float(v) for v in qm.pbar]))
    return rows
