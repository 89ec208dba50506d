"""Practicality layer on top of the raw scheduler.

Early refuse
    The raw scheduler may drop an already-accepted head-of-line task. The
    transform keeps the scheduler's control trajectory untouched and fixes
    the user-facing behavior instead: whenever a drop is decided, some BS
    that is idle this slot physically serves the task, and in exchange the
    next arrival at the dropping BS is refused at admission. The refused
    arrival still enters the control queues as a *phantom* so every later
    control decision is unchanged; when the phantom is eventually
    control-served by BS m', m' idles physically and owes the earlier
    stand-in server one future task takeover. The compensation ledger
    settles lazily, so per-BS physical energy matches the untransformed run
    up to the handful of entries still open at the horizon.

Workload classes
    Tasks are partitioned into K workload intervals; each class runs its own
    scheduler instance against a slice of each BS's energy budget. Static
    energy is split evenly across instances and the active margin
    proportionally to observed class workload.

Capacity multiplexing
    Instances synchronize only at the CPU: if the cycles requested in one
    slot exceed the BS's per-slot cycle budget, lower class indices execute
    first and the remainder carries over, delaying those tasks' completion.

Violation monitor
    Empirical statistics of how far realized head-of-line waiting times
    exceed the scheduler's bound, and the exponential decay rate of the
    exceedance tail.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import SlotDecision, StationConfig, decision_energy

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Early refuse
# ---------------------------------------------------------------------------


@dataclass
class RefuseLedger:
    """Counters for the drop-to-block transform of one scheduler instance."""

    n: int
    credit_cap: int
    block_credits: np.ndarray = None
    owed: np.ndarray = None  # owed[debtor, creditor] physical takeovers
    pending_chains: list = None  # per BS: creditors awaiting their phantom
    substitutions: int = 0
    fallback_drops: int = 0  # no idle peer reachable
    overflow_drops: int = 0  # credit cap hit
    settled: int = 0

    def __post_init__(self):
        if self.block_credits is None:
            self.block_credits = np.zeros(self.n, dtype=int)
        if self.owed is None:
            self.owed = np.zeros((self.n, self.n), dtype=int)
        if self.pending_chains is None:
            self.pending_chains = [deque() for _ in range(self.n)]

    def open_imbalance(self) -> int:
        """Entries that can still skew per-BS energy against the raw run."""
        pending = sum(len(c) for c in self.pending_chains)
        return pending + int(self.owed.sum())


def early_refuse_apply(
    dec: SlotDecision,
    ledger: RefuseLedger,
    peer_mask: np.ndarray,
    stations: list[StationConfig],
) -> SlotDecision:
    """Convert this slot's drops into stand-in serves plus block credits.

    Returns the physical-execution decision; ``dec`` (the control decision)
    is left untouched and must still drive the queue updates. Drops that
    cannot be substituted (no reachable idle BS, or the BS already has a
    full window of outstanding credits) stay plain drops and are counted.
    """
    phys_b = dec.b.copy()
    phys_d = dec.d.copy()
    for n in np.nonzero(dec.d)[0]:
        if ledger.block_credits[n] >= ledger.credit_cap:
            ledger.overflow_drops += 1
            continue
        busy = phys_b.sum(axis=0) > 0
        # lowest-index idle peer; the dropping BS itself only as a last resort
        stand_in = next(
            (m for m in range(ledger.n) if m != n and peer_mask[n, m] and not busy[m]),
            None,
        )
        if stand_in is None and not busy[n]:
            stand_in = int(n)
        if stand_in is None:
            ledger.fallback_drops += 1
            continue
        phys_b[n, stand_in] = 1
        phys_d[n] = 0
        ledger.block_credits[n] += 1
        ledger.pending_chains[n].append(stand_in)
        ledger.substitutions += 1
    return SlotDecision(
        b=phys_b, d=phys_d, gamma=dec.gamma.copy(), energy=decision_energy(phys_b, stations)
    )


def consume_block_credit(ledger: RefuseLedger, n: int):
    """Admission check: refuse the arrival at BS n if a credit is open.

    Returns the creditor BS of the chain this refusal satisfies, or None
    when the arrival must be admitted normally.
    """
    if ledger.block_credits[n] > 0:
        ledger.block_credits[n] -= 1
        return ledger.pending_chains[n].popleft()
    return None


def note_phantom_served(ledger: RefuseLedger, server: int, creditor: int):
    """A phantom was control-served: ``server`` idles and owes the creditor."""
    if server != creditor:
        ledger.owed[server, creditor] += 1
    else:
        ledger.settled += 1


def note_phantom_dropped(ledger: RefuseLedger, n: int, creditor: int):
    """A phantom was control-dropped: block yet another arrival at BS n."""
    if ledger.block_credits[n] >= ledger.credit_cap:
        ledger.overflow_drops += 1
        return
    ledger.block_credits[n] += 1
    ledger.pending_chains[n].append(creditor)


def settle_owed(phys_b: np.ndarray, ledger: RefuseLedger, peer_mask: np.ndarray) -> np.ndarray:
    """Reroute control-assigned serves to settle open compensations.

    Where debtor m' owes creditor m, the first slot in which m is
    control-serving some BS x's task while m' is physically idle (and x can
    reach m') hands the execution to m': m rests, m' works, both energy
    imbalances close.
    """
    debtors, creditors = np.nonzero(ledger.owed)
    for debtor, creditor in zip(debtors, creditors):
        while ledger.owed[debtor, creditor] > 0:
            busy = phys_b.sum(axis=0) > 0
            if busy[debtor]:
                break
            rows = np.nonzero(phys_b[:, creditor])[0]
            row = next((x for x in rows if peer_mask[x, debtor]), None)
            if row is None:
                break
            phys_b[row, creditor] = 0
            phys_b[row, debtor] = 1
            ledger.owed[debtor, creditor] -= 1
            ledger.settled += 1
    return phys_b


# ---------------------------------------------------------------------------
# Workload classes
# ---------------------------------------------------------------------------


@dataclass
class ClassPlan:
    """Workload intervals and the per-BS, per-class energy budget split."""

    k: int
    edges: np.ndarray  # k + 1 boundaries, ascending, covering the range
    budgets: np.ndarray  # (n_stations, k) time-average energy per slot
    reassign_period: int = 1000

    def classify(self, workload: float) -> int:
        """Class index of a workload (intervals closed on the right)."""
        idx = int(np.searchsorted(self.edges[1:-1], workload, side="left"))
        return min(idx, self.k - 1)


def split_budgets(stations: list[StationConfig], shares: np.ndarray) -> np.ndarray:
    """Per-class budgets: even split of static energy, shares of the margin.

    Guarantees sum_k budgets[n, k] == e_budget_n; equal shares give
    e_budget_n / k per class.
    """
    k = len(shares)
    shares = np.asarray(shares, dtype=float)
    shares = shares / shares.sum() if shares.sum() > 0 else np.full(k, 1.0 / k)
    budgets = np.zeros((len(stations), k))
    for n, st in enumerate(stations):
        budgets[n] = st.e_static / k + shares * (st.e_budget - st.e_static)
    return budgets


def class_partition_and_budget(
    samples,
    k: int,
    stations: list[StationConfig],
    history=None,
    reassign_period: int = 1000,
    workload_range: tuple[float, float] | None = None,
) -> ClassPlan:
    """Equal-count quantile intervals over ``samples`` plus the budget split.

    ``history`` (workload draws seen so far) sets the proportional shares;
    without history the shares come from ``samples``. If k exceeds the
    number of distinct samples the plan degrades to fewer classes.
    """
    samples = np.asarray(list(samples), dtype=float)
    if samples.size == 0:
        raise ValueError("need at least one workload sample to build classes")
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = np.unique(samples).size
    if k > distinct:
        logger.warning("only %d distinct workloads; degrading from %d to %d classes", distinct, k, distinct)
        k = distinct
    lo, hi = workload_range if workload_range else (samples.min(), samples.max())
    inner = np.quantile(samples, [i / k for i in range(1, k)]) if k > 1 else np.array([])
    edges = np.concatenate(([lo], inner, [hi]))

    basis = np.asarray(list(history), dtype=float) if history is not None else samples
    plan = ClassPlan(k=k, edges=edges, budgets=np.zeros((len(stations), k)), reassign_period=reassign_period)
    shares = np.zeros(k)
    for w in basis:
        shares[plan.classify(w)] += w
    plan.budgets = split_budgets(stations, shares if shares.sum() > 0 else np.full(k, 1.0))
    return plan


def class_station(st: StationConfig, plan: ClassPlan, c: int, n_idx: int) -> StationConfig:
    """Station parameters as seen by class instance ``c`` on BS ``st``.

    The instance pays the full activation margin when it serves but only its
    share of the static floor, so instance service caps sum to the BS cap.
    """
    e0 = st.e_static / plan.k
    return StationConfig(
        id=st.id,
        cpu_rate=st.cpu_rate,
        e_static=e0,
        e_active=e0 + (st.e_active - st.e_static),
        e_budget=float(plan.budgets[n_idx, c]),
        utility=st.utility,
        position=st.position,
    )


# ---------------------------------------------------------------------------
# Capacity multiplexing
# ---------------------------------------------------------------------------


def multiplex_classes(requests, cpu_rate: float, carryover=None):
    """Execute one BS-slot of CPU across class instances.

    ``requests``: iterable of (class_index, cycles, token) for this slot's
    serve decisions; ``carryover``: list of (token, remaining_cycles) from
    earlier slots, executed first in FIFO order. New requests run in
    ascending class order until the cycle budget is exhausted; the remainder
    carries to the next slot.

    Returns (completed_tokens, new_carryover, executed_cycles).
    """
    budget = float(cpu_rate)
    executed = 0.0
    completed = []
    queue = list(carryover or [])
    queue += [(token, float(cycles)) for _, cycles, token in sorted(requests, key=lambda r: r[0])]
    remaining: list = []
    for token, cycles in queue:
        if budget <= 0:
            remaining.append((token, cycles))
            continue
        take = min(cycles, budget)
        budget -= take
        executed += take
        left = cycles - take
        if left > 1e-9:
            remaining.append((token, left))
        else:
            completed.append(token)
    return completed, remaining, executed


# ---------------------------------------------------------------------------
# Violation monitor
# ---------------------------------------------------------------------------


@dataclass
class ViolationStats:
    p_e: float
    p_v_given_e: dict | None
    decay_slope: float | None
    r_squared: float | None

    def as_dict(self) -> dict:
        return {
            "p_e": self.p_e,
            "p_v_given_e": None
            if self.p_v_given_e is None
            else {str(t): v for t, v in self.p_v_given_e.items()},
            "decay_slope": self.decay_slope,
            "r_squared": self.r_squared,
        }


def violation_stats(h_trace, h_max: int, t_values) -> ViolationStats:
    """Edge/violation statistics of a head-of-line waiting time trace.

    p_e is the fraction of slots at or above ``h_max``; p_v_given_e(T) the
    fraction of those slots also at or above ``h_max + T``. The decay rate
    is the least-squares slope of log p_v_given_e(T) against T over the
    strictly positive points.
    """
    h = np.asarray(h_trace, dtype=float)
    if h.size == 0:
        raise ValueError("empty trace")
    edge = h >= h_max
    p_e = float(edge.mean())
    if p_e == 0.0:
        return ViolationStats(p_e=0.0, p_v_given_e=None, decay_slope=None, r_squared=None)
    n_edge = int(edge.sum())
    pve = {int(t): float((h >= h_max + t).sum() / n_edge) for t in t_values}
    pts = [(t, v) for t, v in pve.items() if v > 0]
    slope = r2 = None
    if len(pts) >= 2:
        ts = np.array([p[0] for p in pts], dtype=float)
        logs = np.log([p[1] for p in pts])
        slope_, intercept = np.polyfit(ts, logs, 1)
        fit = slope_ * ts + intercept
        ss_res = float(np.sum((logs - fit) ** 2))
        ss_tot = float(np.sum((logs - logs.mean()) ** 2))
        slope = float(slope_)
        r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return ViolationStats(p_e=p_e, p_v_given_e=pve, decay_slope=slope, r_squared=r2)
