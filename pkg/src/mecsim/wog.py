"""Online scheduler with a worst-case waiting-time guarantee.

Each slot runs four stages against the observed virtual queues:

1. pick the auxiliary variable gamma_n in [-1, 1] maximizing
   V * g_hat(gamma) - Z_n * gamma (closed form per utility family);
2. choose the serve matrix b by maximum-weight assignment with pairing
   weight min(H_n, Z_n) - W_m * (e_active_m - e_static_m);
3. drop the head-of-line task wherever a backlogged, unserved queue has
   H_n >= Z_n;
4. update the physical backlog and the virtual queues Z (throughput
   coupling), W (energy debt) and H (head-of-line age).

The tradeoff parameter V buys utility at the price of waiting time: for
every sample path H_n(t) <= ceil(V * nu_n) + 2, Z_n(t) obeys the same
bound, and W_n(t) <= ceil(H_max_g / (e_active - e_static)) + e_active -
e_budget. Those three bounds are asserted by the simulation engine on
every slot.

Z normally consumes the known arrival rate lambda_n; in "observed" mode it
consumes the delayed arrival observation A_n(t - W) with
W = max_n ceil(V * nu_n) + 2 instead, so no rate knowledge is needed.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .assignment import build_schedule
from .model import (
    ConfigurationError,
    Linear,
    Log,
    PiecewiseLinearConcave,
    QueueState,
    SlotDecision,
    StationConfig,
    Topology,
    Utility,
    decision_energy,
    g_hat_eval,
    update_physical_queue,
    utility_nu,
    w_next,
    z_next,
)

MODE_KNOWN = "known"
MODE_OBSERVED = "observed"


@dataclass
class WogConfig:
    """Scheduler parameters: tradeoff weight, rate mode, observation window."""

    v: float
    mode: str = MODE_KNOWN
    w_window: int | None = None  # observed mode; defaults to the global H bound
    l_max: int | None = None

    def __post_init__(self):
        if self.v <= 0:
            raise ConfigurationError(f"V must be > 0, got {self.v}")
        if self.mode not in (MODE_KNOWN, MODE_OBSERVED):
            raise ConfigurationError(f"unknown rate mode {self.mode!r}")

    def resolved_window(self, stations: list[StationConfig]) -> int:
        """Observation delay for the Z feed: defaults to the global H bound."""
        if self.w_window is not None:
            return self.w_window
        return max(h_max_bound(self.v, utility_nu(st.utility)) for st in stations)


@dataclass
class BoundReport:
    """Closed-form per-BS queue bounds and the largest deadline-feasible V."""

    h_max: np.ndarray  # ceil(V * nu_n) + 2
    z_max: np.ndarray
    w_max: np.ndarray
    v_ceiling: float


def h_max_bound(v: float, nu: float) -> int:
    return int(math.ceil(v * nu)) + 2


def deadline_bounds(
    v: float,
    stations: list[StationConfig],
    topology: Topology,
    l_max: int | None = None,
) -> BoundReport:
    """Queue bounds for tradeoff weight ``v`` and the V ceiling for ``l_max``.

    The ceiling is the largest V with ceil(V * max nu) + 2 <= l_max -
    2 * delta_max; a deadline too tight to fit any positive V is a
    configuration error.
    """
    nus = np.array([utility_nu(st.utility) for st in stations])
    h_max = np.array([h_max_bound(v, nu) for nu in nus])
    h_max_g = int(h_max.max())
    w_max = np.array(
        [
            math.ceil(h_max_g / (st.e_active - st.e_static)) + st.e_active - st.e_budget
            for st in stations
        ]
    )
    v_ceiling = math.inf
    if l_max is not None:
        nu_top = float(nus.max())
        slack = l_max - 2 * topology.delta_max - 2
        if slack < 1:
            raise ConfigurationError(
                f"deadline {l_max} leaves no room for any V "
                f"(needs l_max >= 2 * delta_max + 3 = {2 * topology.delta_max + 3})"
            )
        v_ceiling = math.inf if nu_top == 0 else slack / nu_top
    return BoundReport(h_max=h_max, z_max=h_max.copy(), w_max=w_max, v_ceiling=v_ceiling)


# ---------------------------------------------------------------------------
# Stage 1: auxiliary variable
# ---------------------------------------------------------------------------


def choose_gamma(z: float, v: float, utility: Utility) -> float:
    """Maximize v * g_hat(gamma) - z * gamma over gamma in [-1, 1].

    Linear utilities flip between the endpoints (+1 on the tie); smooth
    utilities use the stationarity condition v * g'(gamma) = z clipped to
    the box; piecewise-linear utilities are maximized over their knots.
    """
    if z < 0:
        raise ValueError(f"Z must be >= 0, got {z}")
    nu = utility_nu(utility)
    if isinstance(utility, Linear):
        return 1.0 if v * nu >= z else -1.0
    if isinstance(utility, Log):
        if z > v * nu:
            return -1.0
        if z == 0:
            return 1.0
        return min(max(v * utility.scale / z - 1.0, 0.0), 1.0)
    if isinstance(utility, PiecewiseLinearConcave):
        candidates = sorted({-1.0, 0.0, 1.0} | {x for x, _ in utility.points})
        vals = [v * g_hat_eval(utility, g) - z * g for g in candidates]
        best_val = max(vals)
        return max(g for g, val in zip(candidates, vals) if val >= best_val - 1e-12)
    raise TypeError(f"unknown utility {utility!r}")


# ---------------------------------------------------------------------------
# Stage 3: drop decisions
# ---------------------------------------------------------------------------


def drop_decisions(queues: list[QueueState], eta: np.ndarray) -> np.ndarray:
    """D_n = 1 iff the queue is backlogged, unserved, and H_n >= Z_n."""
    return np.array(
        [
            int(e == 0 and q.q_len > 0 and q.h >= q.z)
            for q, e in zip(queues, eta)
        ],
        dtype=np.int8,
    )


# ---------------------------------------------------------------------------
# Scheduler state and the per-slot step
# ---------------------------------------------------------------------------


@dataclass
class SchedulerState:
    """Mutable state owned by one scheduler instance (one workload class)."""

    queues: list[QueueState]
    slot: int = 0
    arrival_history: deque = field(default_factory=deque)  # observed mode window

    @classmethod
    def fresh(cls, n: int) -> "SchedulerState":
        return cls(queues=[QueueState() for _ in range(n)])


def wog_slot(
    state: SchedulerState,
    arrivals: np.ndarray,
    cfg: WogConfig,
    stations: list[StationConfig],
    topology: Topology,
    lam: np.ndarray | None = None,
) -> SlotDecision:
    """Run stages 1-4 for one slot, mutating ``state`` to the next slot.

    ``lam`` is required in known-rate mode; observed mode feeds Z with the
    arrival observed ``w_window`` slots ago (zero before the run started).
    Arrivals of this slot are enqueued in stage 4 and become servable next
    slot.
    """
    n = len(state.queues)
    arrivals = np.asarray(arrivals, dtype=np.int8)
    if cfg.mode == MODE_KNOWN and lam is None:
        raise ConfigurationError("known-rate mode needs lambda")

    gamma = np.array(
        [choose_gamma(q.z, cfg.v, st.utility) for q, st in zip(state.queues, stations)]
    )
    b = build_schedule(state.queues, stations, topology.peer_mask)
    eta = b.sum(axis=1)
    d = drop_decisions(state.queues, eta)
    energy = decision_energy(b, stations)

    if cfg.mode == MODE_OBSERVED:
        window = cfg.resolved_window(stations)
        if len(state.arrival_history) >= window:
            z_feed = state.arrival_history[-window].astype(float)
        else:
            z_feed = np.zeros(n)  # A(t - W) = 0 before the run started
    else:
        z_feed = np.asarray(lam, dtype=float)

    for i, q in enumerate(state.queues):
        q2 = update_physical_queue(q, int(eta[i]), int(d[i]), int(arrivals[i]), state.slot)
        q2.z = z_next(q.z, float(z_feed[i]), int(d[i]), float(gamma[i]))
        q2.w = w_next(q.w, stations[i].e_budget, float(energy[i]))
        state.queues[i] = q2

    if cfg.mode == MODE_OBSERVED:
        state.arrival_history.append(arrivals.copy())
        while len(state.arrival_history) > cfg.resolved_window(stations):
            state.arrival_history.popleft()
    state.slot += 1
    return SlotDecision(b=b, d=d, gamma=gamma, energy=energy)
