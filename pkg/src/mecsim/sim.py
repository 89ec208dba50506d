"""Slotted-time simulation engine.

Drives one scenario end to end: arrival generation, admission, the selected
scheduling algorithm per workload class, CPU multiplexing across classes,
trip-time lifting of the zero-delay schedule, and metric accumulation.

Timeline conventions: a task arriving in slot t is enqueued at the end of
slot t and first servable in slot t+1; a task completing in slot t has a
zero-delay response of t minus its arrival slot. Offload-capable schedules
are produced against the zero-trip-time relaxation and lifted afterwards:
faithful lifting delays every execution by delta_max and adds the actual
return trip for offloaded tasks, so a relaxed response R becomes at most
R + 2 * delta_max.

Runs are deterministic: one ``numpy`` generator seeded from the scenario
drives every random draw in a fixed order.
"""
from __future__ import annotations

import subprocess
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .arrivals import (
    ArrivalProcess,
    ArrivalState,
    BernoulliPerBS,
    MarkovBurst,
    UserGroupPoisson,
    generate_requests,
    giant_arrival_rates,
)
from .assignment import WeightMatrix, max_weight_assignment
from .extensions import (
    ClassPlan,
    RefuseLedger,
    class_partition_and_budget,
    class_station,
    consume_block_credit,
    early_refuse_apply,
    multiplex_classes,
    note_phantom_dropped,
    note_phantom_served,
    settle_owed,
    split_budgets,
    violation_stats,
)
from .known_rate import build_plan, run_known_rate_batch, run_known_rate_slot, solve_pk
from .model import (
    ConfigurationError,
    QueueState,
    SlotDecision,
    StationConfig,
    Topology,
    decision_energy,
    update_physical_queue,
    utility_eval,
)
from .wog import MODE_KNOWN, MODE_OBSERVED, SchedulerState, WogConfig, deadline_bounds, wog_slot

ALGORITHMS = ("known", "wog", "wog-observed", "nop", "greedy")
LIFTING_MODES = ("faithful", "eager")

TRACE_COLUMNS = (
    "slot", "bs", "class", "Q", "H", "Z", "W", "eta", "D", "gamma", "energy_j", "arrivals",
)


# ---------------------------------------------------------------------------
# Scenario (runtime-resolved) and records
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Everything one run needs, already validated and in engine units."""

    stations: list[StationConfig]
    topology: Topology
    process: ArrivalProcess
    algorithm: str
    horizon: int
    seed: int
    v: float = 10.0
    k_classes: int = 1
    l_max: int = 50  # slots
    slot_ms: float = 1.0
    load_factor: float = 1.0
    lifting: str = "faithful"
    early_refuse: bool = False
    capacity_model: bool | None = None  # None: on iff workloads are sampled
    workload_range: tuple[float, float] | None = None
    reassign_period: int = 1000
    blocked_penalty: float = 0.0
    nop_backlog_cap: int | None = None
    plan_method: str = "auto"
    collect_trace: bool = False
    config_echo: dict | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.lifting not in LIFTING_MODES:
            raise ConfigurationError(f"unknown lifting mode {self.lifting!r}")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive")

    @property
    def capacity_enabled(self) -> bool:
        if self.capacity_model is not None:
            return self.capacity_model
        return not isinstance(self.process, BernoulliPerBS) or self.k_classes > 1


@dataclass
class TaskRecord:
    """One user task, from request to outcome."""

    bs: int
    cls: int
    arrival_slot: int
    cycles: float
    outcome: str = "pending"  # served | blocked | dropped | pending
    server: int = -1
    response_slots: float = -1.0
    late: bool = False


@dataclass
class GiantTask:
    """Per-slot, per-BS, per-class binding of all arriving tasks."""

    bs: int
    cls: int
    arrival_slot: int
    cycles: float
    tasks: list[int]  # TaskRecord indices
    phantom: bool = False
    creditor: int = -1


def lift_relaxed_schedule(events, topology: Topology, mode: str = "faithful"):
    """Lift zero-trip-time serve events onto the delayed network.

    ``events``: iterables of (slot, origin, server, relaxed_response).
    Faithful mode shifts every execution by delta_max and adds the actual
    return trip for offloaded tasks; the reported response is then at most
    relaxed_response + 2 * delta_max. Eager mode delays only offloaded
    tasks, by the actual one-way trip each way.

    Returns a list of (exec_slot, origin, server, response, response_bound).
    """
    if mode not in LIFTING_MODES:
        raise ConfigurationError(f"unknown lifting mode {mode!r}")
    d_max = topology.delta_max
    out = []
    for slot, origin, server, relaxed in events:
        back = int(topology.delta[origin, server]) if origin != server else 0
        if mode == "faithful":
            exec_slot = slot + d_max
            response = relaxed + d_max + back
        else:
            trip = int(topology.delta[origin, server]) if origin != server else 0
            exec_slot = slot + trip
            response = relaxed + 2 * trip
        out.append((exec_slot, origin, server, response, relaxed + 2 * d_max))
    return out


def baseline_step(
    mode: str,
    queues: list[QueueState],
    stations: list[StationConfig],
    peer_mask: np.ndarray,
    cum_energy: np.ndarray | None = None,
    slot: int = 0,
) -> SlotDecision:
    """One slot of a comparison policy.

    ``nop`` serves the local head whenever doing so keeps the running energy
    total within budget; it never offloads. ``greedy`` maximizes total
    waiting age via the assignment solver with no drop or block logic and no
    virtual-queue bookkeeping (a latency-greedy stand-in for published
    peer-offloading baselines; not a faithful reimplementation of any of
    them). Both policies may only activate a BS whose running energy total
    stays within its physical budget.
    """
    n = len(queues)
    b = np.zeros((n, n), dtype=np.int8)

    def feasible(m):
        if cum_energy is None:
            return True
        return cum_energy[m] + stations[m].e_active <= stations[m].e_budget * (slot + 1) + 1e-12

    if mode == "nop":
        for i, q in enumerate(queues):
            if q.q_len > 0 and feasible(i):
                b[i, i] = 1
    elif mode == "greedy":
        ages = np.array([float(q.h) for q in queues])
        empty = np.array([q.q_len == 0 for q in queues])
        blocked_servers = np.array([not feasible(m) for m in range(n)])
        forbidden = empty[:, None] | ~np.asarray(peer_mask, dtype=bool) | blocked_servers[None, :]
        if not np.all(forbidden):
            w = np.where(forbidden, 0.0, np.broadcast_to(ages[:, None], (n, n)))
            assign, _ = max_weight_assignment(WeightMatrix(w=w, forbidden=forbidden))
            for row, col in enumerate(assign):
                if col is not None and ages[row] > 0 and not forbidden[row, col]:
                    b[row, col] = 1
    else:
        raise ConfigurationError(f"unknown baseline {mode!r}")
    return SlotDecision(
        b=b,
        d=np.zeros(n, dtype=np.int8),
        gamma=np.zeros(n),
        energy=decision_energy(b, stations),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsSummary:
    algorithm: str
    seed: int
    horizon_slots: int
    n_stations: int
    k_classes: int
    slot_ms: float
    arrived: int = 0
    served: int = 0
    blocked: int = 0
    dropped: int = 0
    late: int = 0
    pending: int = 0
    giants_arrived: int = 0
    giants_served: int = 0
    giants_blocked: int = 0
    giants_dropped: int = 0
    giants_late: int = 0
    giants_pending: int = 0
    response_mean_ms: float = 0.0
    response_max_ms: float = 0.0
    satisfaction_ratio: float = 1.0
    block_rate: float = 0.0
    utility: float = 0.0
    utility_running_avg: float = 0.0
    throughput_per_bs: list = field(default_factory=list)
    service_rate_per_bs: list = field(default_factory=list)
    energy_avg_j: list = field(default_factory=list)
    energy_budget_j: list = field(default_factory=list)
    h_max_observed: list = field(default_factory=list)
    z_max_observed: list = field(default_factory=list)
    w_max_observed: list = field(default_factory=list)
    realized_h_max: list = field(default_factory=list)
    capacity_delayed: int = 0
    bounds: dict | None = None
    early_refuse_stats: dict | None = None
    violation_stats: dict | None = None
    config: dict | None = None
    version: str = ""

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        return out


def _version_text() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"mecsim-{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mecsim-{__version__}"


# ---------------------------------------------------------------------------
# The run
# ---------------------------------------------------------------------------

_PARTITION_SAMPLES = 4000


class SimulationRun:
    """Owns all mutable state of one simulation run."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.n = len(scenario.stations)
        self.tasks: list[TaskRecord] = []
        self.trace_rows: list[tuple] = []
        self._setup_workloads()
        self._setup_classes()
        self._setup_instances()
        self._setup_execution()

    # -- setup ---------------------------------------------------------------

    def _setup_workloads(self):
        sc = self.sc
        self.samples_workloads = isinstance(sc.process, (UserGroupPoisson, MarkovBurst))
        if self.samples_workloads:
            lo, hi = sc.workload_range or (2.5e6, 7.5e6)
            self.workload_range = (float(lo), float(hi))
            self.workload_sampler = lambda rng: rng.uniform(*self.workload_range)
        else:
            self.workload_range = None
            self.workload_sampler = None

    def _setup_classes(self):
        sc = self.sc
        if sc.k_classes > 1 and self.samples_workloads:
            samples = self.rng.uniform(*self.workload_range, size=_PARTITION_SAMPLES)
            self.plan = class_partition_and_budget(
                samples, sc.k_classes, sc.stations,
                reassign_period=sc.reassign_period, workload_range=self.workload_range,
            )
        else:
            self.plan = ClassPlan(
                k=1,
                edges=np.array(self.workload_range if self.workload_range else (0.0, np.inf)),
                budgets=np.array([[st.e_budget] for st in sc.stations]),
                reassign_period=sc.reassign_period,
            )
        self.k = self.plan.k
        # probability a sampled workload lands in each class (uniform draws)
        if self.samples_workloads:
            lo, hi = self.workload_range
            widths = np.diff(np.clip(self.plan.edges, lo, hi))
            self.class_probs = widths / (hi - lo) if hi > lo else np.ones(self.k) / self.k
        else:
            self.class_probs = np.ones(1)
        self.class_history = [0.0] * self.k  # workload observed per class

    def _setup_instances(self):
        sc = self.sc
        self.class_stations = [
            [class_station(st, self.plan, c, i) for i, st in enumerate(sc.stations)]
            for c in range(self.k)
        ]
        self.lam = giant_arrival_rates(sc.process, self.n, self.class_probs)
        self.queues_fifo = [[deque() for _ in range(self.n)] for _ in range(self.k)]
        self.algorithm = sc.algorithm

        if self.algorithm in ("wog", "wog-observed"):
            mode = MODE_KNOWN if self.algorithm == "wog" else MODE_OBSERVED
            self.wog_cfg = WogConfig(v=sc.v, mode=mode, l_max=sc.l_max)
            self.states = [SchedulerState.fresh(self.n) for _ in range(self.k)]
            self.reports = [
                deadline_bounds(sc.v, self.class_stations[c], sc.topology, l_max=None)
                for c in range(self.k)
            ]
            self.ledgers = [
                RefuseLedger(n=self.n, credit_cap=int(self.reports[c].h_max.max()))
                for c in range(self.k)
            ] if sc.early_refuse else None
        elif self.algorithm == "known":
            self.known_sols = []
            self.known_plans = []
            for c in range(self.k):
                sol = solve_pk(self.class_stations[c], self.lam[:, c])
                self.known_sols.append(sol)
                self.known_plans.append(build_plan(sol, method=sc.plan_method))
            self.known_holding: list = []  # (giant, origin, server) to serve next slot
        else:  # baselines
            self.base_queues = [[QueueState() for _ in range(self.n)] for _ in range(self.k)]
            self.cum_energy = np.zeros((self.k, self.n))
            self.backlog_cap = sc.nop_backlog_cap if sc.nop_backlog_cap is not None else sc.l_max

        self.arrival_state = ArrivalState.fresh(sc.process, self.rng)

    def _setup_execution(self):
        sc = self.sc
        self.capacity = sc.capacity_enabled
        self.pipelines = [[] for _ in range(self.n)]  # carryover: (giant, remaining)
        self.submit_buf = [[] for _ in range(self.n)]  # (cls, cycles, giant)
        self.phys_serves = np.zeros(self.n, dtype=np.int64)
        self.phys_energy = np.zeros(self.n)
        self.ctrl_energy = np.zeros((self.k, self.n))
        self.h_observed = np.zeros((self.k, self.n))
        self.z_observed = np.zeros((self.k, self.n))
        self.w_observed = np.zeros((self.k, self.n))
        self.realized_h = np.zeros((self.sc.horizon, self.n), dtype=np.int32)
        self.giant_counts = {"arrived": 0, "blocked": 0, "dropped": 0, "served": 0, "late": 0}
        self.capacity_delayed = 0
        self.ontime_by_bs = np.zeros(self.n, dtype=np.int64)
        self.late_by_bs = np.zeros(self.n, dtype=np.int64)
        self.blocked_g_by_bs = np.zeros(self.n, dtype=np.int64)
        self.served_by_server = np.zeros(self.n, dtype=np.int64)
        self.response_sum = 0.0
        self.response_max = 0.0
        self.response_count = 0
        self.checkpoints: list[float] = []
        self.d_max = sc.topology.delta_max

    # -- helpers ---------------------------------------------------------------

    def _bind_arrivals(self, slot: int):
        """Raw requests -> per (bs, class) giant tasks with task records."""
        sc = self.sc
        requests = generate_requests(sc.process, self.arrival_state, self.rng, self.workload_sampler)
        grouped: dict[tuple[int, int], GiantTask] = {}
        for bs, cycles in requests:
            if cycles is None:
                cycles = sc.stations[bs].cpu_rate  # one full slot of work
                cls = self.plan.classify(cycles) if self.k > 1 else 0
            else:
                cls = self.plan.classify(cycles)
            self.class_history[cls] += cycles
            idx = len(self.tasks)
            self.tasks.append(TaskRecord(bs=bs, cls=cls, arrival_slot=slot, cycles=cycles))
            key = (bs, cls)
            if key not in grouped:
                grouped[key] = GiantTask(bs=bs, cls=cls, arrival_slot=slot, cycles=0.0, tasks=[])
            grouped[key].cycles += cycles
            grouped[key].tasks.append(idx)
        return grouped

    def _mark(self, giant: GiantTask, outcome: str, server: int = -1, response: float = -1.0):
        late = False
        if outcome == "served":
            late = response > self.sc.l_max
            self.giant_counts["served"] += 1
            if late:
                self.giant_counts["late"] += 1
                self.late_by_bs[giant.bs] += 1
            else:
                self.ontime_by_bs[giant.bs] += 1
            self.served_by_server[server] += 1
            self.response_sum += response
            self.response_max = max(self.response_max, response)
            self.response_count += 1
        elif outcome == "blocked":
            self.giant_counts["blocked"] += 1
            self.blocked_g_by_bs[giant.bs] += 1
        elif outcome == "dropped":
            self.giant_counts["dropped"] += 1
        for idx in giant.tasks:
            rec = self.tasks[idx]
            rec.outcome = outcome
            rec.server = server
            rec.response_slots = response
            rec.late = late

    def _lifted_response(self, giant: GiantTask, completion_slot: int, server: int) -> float:
        relaxed = completion_slot - giant.arrival_slot
        if self.algorithm == "nop":
            return float(relaxed)  # no offloading: schedule is feasible undelayed
        back = int(self.sc.topology.delta[giant.bs, server]) if server != giant.bs else 0
        if self.sc.lifting == "faithful":
            return float(relaxed + self.d_max + back)
        return float(relaxed + 2 * back)

    def _submit(self, giant: GiantTask, server: int, slot: int):
        if not self.capacity:
            self._mark(giant, "served", server, self._lifted_response(giant, slot, server))
            return
        self.submit_buf[server].append((giant.cls, giant.cycles, (giant, server, slot)))

    def _run_pipelines(self, slot: int):
        if not self.capacity:
            return
        for m in range(self.n):
            if not self.submit_buf[m] and not self.pipelines[m]:
                continue
            completed, carry, _ = multiplex_classes(
                self.submit_buf[m], self.sc.stations[m].cpu_rate, self.pipelines[m]
            )
            self.pipelines[m] = carry
            self.submit_buf[m] = []
            for giant, server, submitted in completed:
                if slot > submitted:
                    self.capacity_delayed += 1
                self._mark(giant, "served", server, self._lifted_response(giant, slot, server))

    def _record_realized_ages(self, slot: int):
        ages = np.zeros(self.n, dtype=np.int64)
        for c in range(self.k):
            for nidx in range(self.n):
                fifo = self.queues_fifo[c][nidx]
                if fifo:
                    ages[nidx] = max(ages[nidx], slot - fifo[0].arrival_slot)
        for m in range(self.n):
            for token, _rem in self.pipelines[m]:
                giant = token[0]
                ages[giant.bs] = max(ages[giant.bs], slot - giant.arrival_slot)
        if self.algorithm == "known":
            for giant, _o, _s in self.known_holding:
                ages[giant.bs] = max(ages[giant.bs], slot - giant.arrival_slot)
        self.realized_h[slot] = ages

    def _trace(self, slot, cls, queues, dec, arrivals):
        if not self.sc.collect_trace:
            return
        for nidx in range(self.n):
            q = queues[nidx] if queues else None
            self.trace_rows.append(
                (
                    slot, nidx, cls,
                    q.q_len if q else 0,
                    q.h if q else 0,
                    round(q.z, 9) if q else 0.0,
                    round(q.w, 9) if q else 0.0,
                    int(dec.eta[nidx]),
                    int(dec.d[nidx]),
                    round(float(dec.gamma[nidx]), 9),
                    round(float(dec.energy[nidx]), 9),
                    int(arrivals[nidx]),
                )
            )

    # -- per-algorithm slot logic ---------------------------------------------

    def _slot_wog(self, slot: int, giants: dict):
        sc = self.sc
        for c in range(self.k):
            arrivals = np.zeros(self.n, dtype=np.int8)
            raw_arrivals = np.zeros(self.n, dtype=np.int8)
            for (bs, cls), giant in giants.items():
                if cls != c:
                    continue
                raw_arrivals[bs] = 1
                if self.ledgers is not None:
                    creditor = consume_block_credit(self.ledgers[c], bs)
                    if creditor is not None:
                        giant.phantom = True
                        giant.creditor = creditor
                        self._mark(giant, "blocked")
                arrivals[bs] = 1
                self.queues_fifo[c][bs].append(giant)

            served_giants = {}
            dec = wog_slot(
                self.states[c], arrivals, self.wog_cfg, self.class_stations[c],
                sc.topology, lam=self.lam[:, c],
            )
            eta = dec.eta
            for nidx in range(self.n):
                if eta[nidx] == 1:
                    served_giants[nidx] = self.queues_fifo[c][nidx].popleft()
                elif dec.d[nidx] == 1:
                    served_giants[nidx] = None  # dropped head
            # physical overlay
            phys = dec
            if self.ledgers is not None:
                ledger = self.ledgers[c]
                phys = early_refuse_apply(dec, ledger, sc.topology.peer_mask, self.class_stations[c])
                for nidx in np.nonzero(dec.d)[0]:
                    giant = self.queues_fifo[c][nidx].popleft()
                    if phys.d[nidx] == 0:  # substituted: physically served by stand-in
                        server = int(np.nonzero(phys.b[nidx])[0][0])
                        if giant.phantom:
                            # a phantom cannot be physically served; undo and
                            # treat like a phantom drop
                            phys.b[nidx, server] = 0
                            ledger.substitutions -= 1
                            ledger.block_credits[nidx] -= 1
                            ledger.pending_chains[nidx].pop()
                            note_phantom_dropped(ledger, nidx, giant.creditor)
                        else:
                            self._submit(giant, server, slot)
                    else:
                        if giant.phantom:
                            note_phantom_dropped(ledger, nidx, giant.creditor)
                        else:
                            self._mark(giant, "dropped")
                # phantom control-serves execute nothing physically
                for nidx, giant in served_giants.items():
                    if giant is not None and giant.phantom:
                        server = int(np.nonzero(dec.b[nidx])[0][0])
                        phys.b[nidx, server] = 0
                        note_phantom_served(ledger, server, giant.creditor)
                settle_owed(phys.b, ledger, sc.topology.peer_mask)
                phys.energy = decision_energy(phys.b, self.class_stations[c])
            else:
                for nidx in np.nonzero(dec.d)[0]:
                    giant = self.queues_fifo[c][nidx].popleft()
                    self._mark(giant, "dropped")

            # physical execution of real control-serves (possibly rerouted)
            for nidx, giant in served_giants.items():
                if giant is None or giant.phantom:
                    continue
                cols = np.nonzero(phys.b[nidx])[0]
                assert cols.size == 1, "a real control-serve lost its physical server"
                self._submit(giant, int(cols[0]), slot)

            self._account_control(c, dec, phys)
            self._check_bounds(c, slot)
            self._trace(slot, c, self.states[c].queues, dec, raw_arrivals)

    def _slot_known(self, slot: int, giants: dict):
        sc = self.sc
        # serve what was assigned last slot
        served_b = [np.zeros((self.n, self.n), dtype=np.int8) for _ in range(self.k)]
        for giant, origin, server in self.known_holding:
            self._submit(giant, server, slot)
            self.phys_serves[server] += 1
            served_b[giant.cls][origin, server] = 1
        holding_energy = np.zeros(self.n)
        active = {server for _, _, server in self.known_holding}
        for m, st in enumerate(sc.stations):
            holding_energy[m] = st.e_active if m in active else st.e_static
        self.phys_energy += holding_energy
        self.known_holding = []

        for c in range(self.k):
            arrivals = np.zeros(self.n, dtype=np.int8)
            slot_giants: dict[int, GiantTask] = {}
            for (bs, cls), giant in giants.items():
                if cls != c:
                    continue
                arrivals[bs] = 1
                slot_giants[bs] = giant
            assignment, drops, origin = run_known_rate_slot(
                arrivals, self.lam[:, c], self.known_sols[c], self.rng, self.known_plans[c]
            )
            for bs in np.nonzero(drops)[0]:
                self._mark(slot_giants[bs], "blocked")  # decided at arrival
            for m in np.nonzero(assignment)[0]:
                o = origin[m]
                self.known_holding.append((slot_giants[o], o, int(m)))
            dec = SlotDecision(
                b=served_b[c],
                d=np.asarray(drops, dtype=np.int8),
                gamma=np.zeros(self.n),
                energy=holding_energy if c == 0 else np.zeros(self.n),
            )
            self._trace(slot, c, None, dec, arrivals)

    def _slot_baseline(self, slot: int, giants: dict):
        sc = self.sc
        for c in range(self.k):
            arrivals = np.zeros(self.n, dtype=np.int8)
            raw_arrivals = np.zeros(self.n, dtype=np.int8)
            for (bs, cls), giant in giants.items():
                if cls != c:
                    continue
                raw_arrivals[bs] = 1
                if self.algorithm == "nop" and self.base_queues[c][bs].q_len >= self.backlog_cap:
                    self._mark(giant, "blocked")
                    continue
                arrivals[bs] = 1
                self.queues_fifo[c][bs].append(giant)
            queues = self.base_queues[c]
            dec = baseline_step(
                "nop" if self.algorithm == "nop" else "greedy",
                queues, self.class_stations[c], sc.topology.peer_mask,
                cum_energy=self.cum_energy[c],
                slot=slot,
            )
            eta = dec.eta
            for nidx in range(self.n):
                if eta[nidx] == 1:
                    giant = self.queues_fifo[c][nidx].popleft()
                    server = int(np.nonzero(dec.b[nidx])[0][0])
                    self._submit(giant, server, slot)
            for nidx in range(self.n):
                queues[nidx] = update_physical_queue(
                    queues[nidx], int(eta[nidx]), 0, int(arrivals[nidx]), slot
                )
            self.cum_energy[c] += dec.energy
            self._account_control(c, dec, dec)
            self._trace(slot, c, queues, dec, raw_arrivals)

    def _account_control(self, c: int, dec: SlotDecision, phys: SlotDecision):
        self.ctrl_energy[c] += dec.energy
        mu = phys.b.sum(axis=0)
        self.phys_serves += mu
        base = np.array([st.e_static for st in self.sc.stations])
        marg = np.array([st.e_active - st.e_static for st in self.sc.stations])
        if c == 0:
            self.phys_energy += base
        self.phys_energy += marg * mu

    def _check_bounds(self, c: int, slot: int):
        report = self.reports[c]
        for nidx, q in enumerate(self.states[c].queues):
            self.h_observed[c, nidx] = max(self.h_observed[c, nidx], q.h)
            self.z_observed[c, nidx] = max(self.z_observed[c, nidx], q.z)
            self.w_observed[c, nidx] = max(self.w_observed[c, nidx], q.w)
            if q.h > report.h_max[nidx] or q.z > report.z_max[nidx] + 1e-9 or q.w > report.w_max[nidx] + 1e-9:
                dump = [
                    f"bs={i} Q={qq.q_len} H={qq.h} Z={qq.z:.3f} W={qq.w:.3f}"
                    for i, qq in enumerate(self.states[c].queues)
                ]
                raise AssertionError(
                    f"queue bound violated at slot {slot} class {c} bs {nidx}: "
                    f"H={q.h} Z={q.z:.3f} W={q.w:.3f} vs bounds "
                    f"{report.h_max[nidx]}/{report.z_max[nidx]}/{report.w_max[nidx]:.3f}\n"
                    + "\n".join(dump)
                )

    # -- main loop -------------------------------------------------------------

    def run(self) -> MetricsSummary:
        sc = self.sc
        checkpoint_every = max(1, sc.horizon // 500)
        for slot in range(sc.horizon):
            giants = self._bind_arrivals(slot)
            self.giant_counts["arrived"] += len(giants)
            if self.algorithm in ("wog", "wog-observed"):
                self._slot_wog(slot, giants)
            elif self.algorithm == "known":
                self._slot_known(slot, giants)
            else:
                self._slot_baseline(slot, giants)
            self._run_pipelines(slot)
            self._record_realized_ages(slot)
            if self.k > 1 and sc.reassign_period > 0 and slot > 0 and slot % sc.reassign_period == 0:
                self.plan.budgets = split_budgets(sc.stations, np.asarray(self.class_history))
                self.class_stations = [
                    [class_station(st, self.plan, c, i) for i, st in enumerate(sc.stations)]
                    for c in range(self.k)
                ]
            if slot % checkpoint_every == 0:
                self.checkpoints.append(self._utility(slot + 1))
        return self._summarize()

    def _utility(self, slots_elapsed: int) -> float:
        sc = self.sc
        t = float(slots_elapsed)
        total = 0.0
        for nidx, st in enumerate(sc.stations):
            ontime_rate = min(self.ontime_by_bs[nidx] / t, 1.0)
            total += utility_eval(st.utility, ontime_rate)
            total -= 2.0 * (self.late_by_bs[nidx] / t)
            total -= sc.blocked_penalty * (self.blocked_g_by_bs[nidx] / t)
        return total

    def _summarize(self) -> MetricsSummary:
        sc = self.sc
        counts = {"served": 0, "blocked": 0, "dropped": 0, "pending": 0, "late": 0}
        responses = []
        for rec in self.tasks:
            if rec.outcome == "pending":
                counts["pending"] += 1
            else:
                counts[rec.outcome] += 1
            if rec.outcome == "served":
                responses.append(rec.response_slots)
                if rec.late:
                    counts["late"] += 1
        arrived = len(self.tasks)
        assert arrived == counts["served"] + counts["blocked"] + counts["dropped"] + counts["pending"], (
            "task accounting does not close"
        )
        gp = self.giant_counts
        gp_pending = gp["arrived"] - gp["served"] - gp["blocked"] - gp["dropped"]
        accepted = arrived - counts["blocked"]
        ontime = counts["served"] - counts["late"]
        summary = MetricsSummary(
            algorithm=sc.algorithm,
            seed=sc.seed,
            horizon_slots=sc.horizon,
            n_stations=self.n,
            k_classes=self.k,
            slot_ms=sc.slot_ms,
            arrived=arrived,
            served=counts["served"],
            blocked=counts["blocked"],
            dropped=counts["dropped"],
            late=counts["late"],
            pending=counts["pending"],
            giants_arrived=gp["arrived"],
            giants_served=gp["served"],
            giants_blocked=gp["blocked"],
            giants_dropped=gp["dropped"],
            giants_late=gp["late"],
            giants_pending=gp_pending,
            response_mean_ms=float(np.mean(responses) * sc.slot_ms) if responses else 0.0,
            response_max_ms=float(self.response_max * sc.slot_ms),
            satisfaction_ratio=(ontime / accepted) if accepted else 1.0,
            block_rate=(counts["blocked"] / arrived) if arrived else 0.0,
            utility=self._utility(sc.horizon),
            utility_running_avg=float(np.mean(self.checkpoints)) if self.checkpoints else 0.0,
            throughput_per_bs=[float(v) / sc.horizon for v in self.ontime_by_bs + self.late_by_bs],
            service_rate_per_bs=[float(v) / sc.horizon for v in self.phys_serves],
            energy_avg_j=[float(e) / sc.horizon for e in self.phys_energy],
            energy_budget_j=[st.e_budget for st in sc.stations],
            h_max_observed=[float(v) for v in self.h_observed.max(axis=0)],
            z_max_observed=[float(v) for v in self.z_observed.max(axis=0)],
            w_max_observed=[float(v) for v in self.w_observed.max(axis=0)],
            realized_h_max=[int(v) for v in self.realized_h.max(axis=0)],
            capacity_delayed=self.capacity_delayed,
            config=sc.config_echo,
            version=_version_text(),
        )
        if sc.algorithm in ("wog", "wog-observed"):
            rep = self.reports[0]
            summary.bounds = {
                "h_max": [int(v) for v in rep.h_max],
                "z_max": [int(v) for v in rep.z_max],
                "w_max": [float(v) for v in rep.w_max],
            }
            if self.ledgers is not None:
                summary.early_refuse_stats = {
                    "substitutions": sum(l.substitutions for l in self.ledgers),
                    "fallback_drops": sum(l.fallback_drops for l in self.ledgers),
                    "overflow_drops": sum(l.overflow_drops for l in self.ledgers),
                    "settled": sum(l.settled for l in self.ledgers),
                    "open_imbalance": sum(l.open_imbalance() for l in self.ledgers),
                }
        h_bound = None
        if sc.algorithm in ("wog", "wog-observed"):
            h_bound = int(max(self.reports[c].h_max.max() for c in range(self.k)))
        elif sc.algorithm == "known":
            h_bound = 1
        if h_bound is not None:
            stats = violation_stats(self.realized_h.ravel(), h_bound, range(1, 11))
            summary.violation_stats = stats.as_dict()
        return summary


def run_simulation(scenario: Scenario) -> tuple[MetricsSummary, list[tuple]]:
    """Run one scenario; returns the summary and (optionally) trace rows."""
    if (
        scenario.algorithm == "known"
        and isinstance(scenario.process, BernoulliPerBS)
        and scenario.k_classes == 1
        and not scenario.capacity_enabled
        and not scenario.early_refuse
    ):
        return _run_known_fast(scenario)
    run = SimulationRun(scenario)
    summary = run.run()
    return summary, run.trace_rows


# ---------------------------------------------------------------------------
# Vectorized fast path for the known-rate algorithm on Bernoulli arrivals
# ---------------------------------------------------------------------------


def _run_known_fast(sc: Scenario) -> tuple[MetricsSummary, list[tuple]]:
    rng = np.random.default_rng(sc.seed)
    n = len(sc.stations)
    t_total = sc.horizon
    proc: BernoulliPerBS = sc.process
    lam = proc.p
    sol = solve_pk(sc.stations, lam)
    plan = build_plan(sol, method=sc.plan_method)

    arrivals = (rng.random((t_total, n)) < lam[None, :]).astype(np.int8)
    assign, drops, origin = run_known_rate_batch(arrivals, lam, sol, rng, plan)

    # serve happens the slot after assignment; last slot's assignment is pending
    served_mask = assign == 1
    served_mask[-1, :] = False
    pending = int(assign[-1].sum())
    origins = origin[served_mask[...]]
    servers = np.nonzero(served_mask)[1]
    d_max = sc.topology.delta_max
    if sc.lifting == "faithful":
        back = np.where(
            origins == servers, 0, sc.topology.delta[origins, servers]
        )
        responses = 1.0 + d_max + back
    else:
        trip = np.where(origins == servers, 0, sc.topology.delta[origins, servers])
        responses = 1.0 + 2.0 * trip
    late_mask = responses > sc.l_max

    arrived = int(arrivals.sum())
    blocked = int(drops.sum())
    served = int(served_mask.sum())
    late = int(late_mask.sum())

    ontime_by_bs = np.bincount(origins[~late_mask], minlength=n)
    late_by_bs = np.bincount(origins[late_mask], minlength=n)
    blocked_by_bs = (drops == 1).sum(axis=0)
    served_by_server = np.bincount(servers, minlength=n)

    # energy: BS m is active in slot t+1 iff assigned at t
    active_slots = assign[:-1].sum(axis=0)
    e0 = np.array([st.e_static for st in sc.stations])
    e1 = np.array([st.e_active for st in sc.stations])
    energy_total = e0 * t_total + (e1 - e0) * active_slots

    def utility_at(t):
        total = 0.0
        for nidx, st in enumerate(sc.stations):
            ontime_rate = min(ontime_by_bs[nidx] / t, 1.0)
            total += utility_eval(st.utility, ontime_rate)
            total -= 2.0 * late_by_bs[nidx] / t
            total -= sc.blocked_penalty * blocked_by_bs[nidx] / t
        return total

    summary = MetricsSummary(
        algorithm=sc.algorithm,
        seed=sc.seed,
        horizon_slots=t_total,
        n_stations=n,
        k_classes=1,
        slot_ms=sc.slot_ms,
        arrived=arrived,
        served=served,
        blocked=blocked,
        dropped=0,
        late=late,
        pending=pending,
        giants_arrived=arrived,
        giants_served=served,
        giants_blocked=blocked,
        giants_dropped=0,
        giants_late=late,
        giants_pending=pending,
        response_mean_ms=float(responses.mean() * sc.slot_ms) if served else 0.0,
        response_max_ms=float(responses.max() * sc.slot_ms) if served else 0.0,
        satisfaction_ratio=((served - late) / (arrived - blocked)) if arrived > blocked else 1.0,
        block_rate=blocked / arrived if arrived else 0.0,
        utility=utility_at(t_total),
        utility_running_avg=utility_at(t_total),
        throughput_per_bs=[float(v) / t_total for v in ontime_by_bs + late_by_bs],
        service_rate_per_bs=[float(v) / t_total for v in served_by_server],
        energy_avg_j=[float(v) / t_total for v in energy_total],
        energy_budget_j=[st.e_budget for st in sc.stations],
        h_max_observed=[0.0] * n,
        z_max_observed=[0.0] * n,
        w_max_observed=[0.0] * n,
        realized_h_max=[1] * n,
        config=sc.config_echo,
        version=_version_text(),
    )
    trace_rows: list[tuple] = []
    if sc.collect_trace:
        for t in range(t_total):
            for nidx in range(n):
                eta = int(t > 0 and assign[t - 1, nidx] == 1)
                trace_rows.append(
                    (
                        t, nidx, 0, 0, 0, 0.0, 0.0, eta,
                        int(drops[t, nidx]), 0.0,
                        round(float(e1[nidx] if eta else e0[nidx]), 9),
                        int(arrivals[t, nidx]),
                    )
                )
    return summary, trace_rows
