"""Core domain model for cooperative peer offloading between edge base stations.

A local network of N base stations (BSs) operates in slotted time. Each slot a
BS may receive at most one aggregated "giant" task, serve at most one task
(its own or a peer's), and drop at most one. The model tracks, per BS:

* the physical backlog Q (a FIFO of arrival timestamps),
* the head-of-line waiting time H (age of the oldest backlogged task),
* a throughput-coupling virtual queue Z,
* an energy-budget virtual queue W.

Energy is binary per slot: ``e_active`` joules when the BS serves a task and
``e_static`` when idle, with a time-average budget ``e_budget``. The budget
induces a long-run service-level cap ``(e_budget - e_static) /
(e_active - e_static)``.

Everything in this module is a plain value type or a pure function; nothing
here owns shared mutable state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np


class ConfigurationError(ValueError):
    """A scenario or station configuration is invalid or infeasible."""


class ContractViolationError(RuntimeError):
    """A caller asked for an operation outside its contract (scheduler bug)."""


class InfeasibleError(RuntimeError):
    """A solver was handed an instance with no feasible solution."""


# ---------------------------------------------------------------------------
# Utility functions and their concave extension
# ---------------------------------------------------------------------------

_SLOPE_TOL = 1e-12


@dataclass(frozen=True)
class Linear:
    """g(y) = slope * y on [0, 1]."""

    slope: float

    def __post_init__(self):
        if self.slope < 0:
            raise ConfigurationError(f"linear utility slope must be >= 0, got {self.slope}")


@dataclass(frozen=True)
class Log:
    """g(y) = scale * ln(1 + y) on [0, 1]."""

    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigurationError(f"log utility scale must be > 0, got {self.scale}")


@dataclass(frozen=True)
class PiecewiseLinearConcave:
    """Concave piecewise-linear utility given as ((x0,g0), ..., (xk,gk)).

    Knots must span [0, 1] with strictly increasing x and non-increasing
    segment slopes (tolerance 1e-12).
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(g)) for x, g in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ConfigurationError("piecewise utility needs at least two knots")
        xs = [p[0] for p in pts]
        if abs(xs[0]) > 1e-15 or abs(xs[-1] - 1.0) > 1e-15:
            raise ConfigurationError("piecewise utility knots must span [0, 1]")
        if any(b - a <= 0 for a, b in zip(xs, xs[1:])):
            raise ConfigurationError("piecewise utility knots must be strictly increasing")
        slopes = self.segment_slopes()
        if any(s2 - s1 > _SLOPE_TOL for s1, s2 in zip(slopes, slopes[1:])):
            raise ConfigurationError("piecewise utility slopes must be non-increasing")

    def segment_slopes(self) -> list[float]:
        return [
            (g2 - g1) / (x2 - x1)
            for (x1, g1), (x2, g2) in zip(self.points, self.points[1:])
        ]


Utility = Union[Linear, Log, PiecewiseLinearConcave]


def utility_nu(utility: Utility) -> float:
    """Bound on the right derivative of g over [0, 1] (attained at 0)."""
    if isinstance(utility, Linear):
        return utility.slope
    if isinstance(utility, Log):
        return utility.scale
    if isinstance(utility, PiecewiseLinearConcave):
        return max(utility.segment_slopes()[0], 0.0)
    raise TypeError(f"unknown utility {utility!r}")


def utility_eval(utility: Utility, y: float) -> float:
    """g(y) for y in [0, 1]."""
    if isinstance(utility, Linear):
        return utility.slope * y
    if isinstance(utility, Log):
        return utility.scale * math.log1p(y)
    if isinstance(utility, PiecewiseLinearConcave):
        xs = [p[0] for p in utility.points]
        gs = [p[1] for p in utility.points]
        return float(np.interp(y, xs, gs))
    raise TypeError(f"unknown utility {utility!r}")


def g_hat_eval(utility: Utility, y: float) -> float:
    """Concave extension of g to [-1, inf): g(clip(y, 0, 1)) + nu * min(y, 0).

    Agrees with g on [0, 1], is non-decreasing and concave on the whole
    domain.
    """
    if y < -1.0:
        raise ValueError(f"g_hat domain is [-1, inf), got y={y}")
    clipped = min(max(y, 0.0), 1.0)
    return utility_eval(utility, clipped) + utility_nu(utility) * min(y, 0.0)


# ---------------------------------------------------------------------------
# Stations and energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationConfig:
    """Per-BS parameters.

    cpu_rate is in CPU cycles per slot; energies are joules per slot.
    """

    id: int
    cpu_rate: float
    e_static: float
    e_active: float
    e_budget: float
    utility: Utility = Linear(1.0)
    position: Optional[tuple[float, float]] = None  # (lat, lon) degrees

    def __post_init__(self):
        if self.cpu_rate <= 0:
            raise ConfigurationError(f"station {self.id}: cpu_rate must be > 0")
        if not self.e_static < self.e_active:
            raise ConfigurationError(
                f"station {self.id}: e_static ({self.e_static}) must be < e_active ({self.e_active})"
            )
        if self.e_static > self.e_budget:
            raise ConfigurationError(
                f"station {self.id}: e_budget ({self.e_budget}) below idle energy "
                f"({self.e_static}); station can never be feasible"
            )

    @property
    def service_cap(self) -> float:
        """Time-average fraction of active slots the energy budget allows."""
        return (self.e_budget - self.e_static) / (self.e_active - self.e_static)


def energy_of_slot(cfg: StationConfig, mu: int) -> float:
    """Energy drawn in one slot: e_active when serving (mu=1), else e_static."""
    if mu not in (0, 1):
        raise ContractViolationError(f"mu must be 0 or 1, got {mu}")
    return cfg.e_active if mu else cfg.e_static


def average_service_level(energies: np.ndarray, cfg: StationConfig) -> float:
    """Recover the mean service level from a trace of per-slot energies."""
    return (float(np.mean(energies)) - cfg.e_static) / (cfg.e_active - cfg.e_static)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

# One-way trip time bands: distance upper bound (m, inclusive) -> milliseconds.
DELTA_BANDS_M = ((300.0, 3.0), (600.0, 4.0), (900.0, 5.0))
PEER_RANGE_M = 900.0


def delta_from_distance(dist_m: float, slot_ms: float = 1.0) -> Optional[int]:
    """One-way trip time in slots for a pair at ``dist_m`` meters.

    Bands are closed on the right: [0,300] -> 3 ms, (300,600] -> 4 ms,
    (600,900] -> 5 ms. Beyond 900 m the pair is not a peer (returns None).
    """
    if dist_m < 0:
        raise ValueError(f"distance must be >= 0, got {dist_m}")
    for upper_m, ms in DELTA_BANDS_M:
        if dist_m <= upper_m:
            return int(math.ceil(ms / slot_ms))
    return None


def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between (lat, lon) points in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    dlat, dlon = lat2 - lat1, lon2 - lon1
    s = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * 6371000.0 * math.asin(min(1.0, math.sqrt(s)))


@dataclass
class Topology:
    """Trip times (slots) and the permitted-offloading mask between BSs."""

    delta: np.ndarray  # (N, N) int, diagonal 0
    peer_mask: np.ndarray  # (N, N) bool, diagonal True

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=int)
        self.peer_mask = np.asarray(self.peer_mask, dtype=bool)
        n = self.delta.shape[0]
        if self.delta.shape != (n, n) or self.peer_mask.shape != (n, n):
            raise ConfigurationError("delta and peer_mask must be square and congruent")
        if np.any(np.diag(self.delta) != 0):
            raise ConfigurationError("delta diagonal must be 0")
        if not np.all(np.diag(self.peer_mask)):
            raise ConfigurationError("peer_mask diagonal must be True")
        both = self.peer_mask & self.peer_mask.T
        if np.any(self.delta[both] != self.delta.T[both]):
            raise ConfigurationError("delta must be symmetric over mutual peers")

    @property
    def n_stations(self) -> int:
        return self.delta.shape[0]

    @property
    def delta_max(self) -> int:
        off = ~np.eye(self.n_stations, dtype=bool) & self.peer_mask
        return int(self.delta[off].max()) if off.any() else 0

    @classmethod
    def from_delta(cls, delta, peer_mask=None) -> "Topology":
        delta = np.asarray(delta, dtype=int)
        if peer_mask is None:
            peer_mask = np.ones_like(delta, dtype=bool)
        return cls(delta=delta, peer_mask=np.asarray(peer_mask, dtype=bool))

    @classmethod
    def from_positions(cls, positions: list[tuple[float, float]], slot_ms: float = 1.0) -> "Topology":
        n = len(positions)
        delta = np.zeros((n, n), dtype=int)
        mask = np.eye(n, dtype=bool)
        for i in range(n):
            for j in range(i + 1, n):
                d = delta_from_distance(haversine_m(positions[i], positions[j]), slot_ms)
                if d is not None:
                    delta[i, j] = delta[j, i] = d
                    mask[i, j] = mask[j, i] = True
        return cls(delta=delta, peer_mask=mask)


# ---------------------------------------------------------------------------
# Queue state and per-slot updates
# ---------------------------------------------------------------------------


@dataclass
class QueueState:
    """Per-BS (and per workload class) scheduler state.

    ``arrival_slots`` is the FIFO of arrival timestamps of backlogged giant
    tasks and is the ground truth: ``q_len == len(arrival_slots)`` and ``h``
    is the age of the oldest entry at the state's current slot (0 if empty).
    """

    q_len: int = 0
    arrival_slots: list[int] = field(default_factory=list)
    z: float = 0.0
    w: float = 0.0
    h: int = 0

    def check(self):
        assert self.q_len == len(self.arrival_slots)
        assert self.z >= 0 and self.w >= 0 and self.h >= 0


def head_age(q: QueueState, slot: int) -> int:
    """Waiting time of the head-of-line task as of ``slot`` (0 if empty)."""
    return slot - q.arrival_slots[0] if q.arrival_slots else 0


def update_physical_queue(q: QueueState, eta: int, d: int, a: int, slot: int) -> QueueState:
    """Advance the physical backlog from slot ``slot`` to ``slot + 1``.

    q' = max(q - eta - d, 0) + a. Serving or dropping removes the oldest
    entry; an arrival appends timestamp ``slot``. ``h`` is recomputed from the
    surviving oldest timestamp as of ``slot + 1``.
    """
    if eta + d > 1:
        raise ContractViolationError(f"eta + d must be <= 1, got eta={eta} d={d}")
    if eta == 1 and q.q_len == 0:
        raise ContractViolationError("scheduler requested service of an empty queue")
    slots = list(q.arrival_slots)
    if (eta + d) == 1 and slots:
        slots.pop(0)
    if a == 1:
        slots.append(slot)
    h = slot + 1 - slots[0] if slots else 0
    return QueueState(q_len=len(slots), arrival_slots=slots, z=q.z, w=q.w, h=h)


def z_next(z: float, lambda_or_obs: float, d: int, gamma: float) -> float:
    """Z' = max(Z - lambda + D + gamma, 0)."""
    return max(z - lambda_or_obs + d + gamma, 0.0)


def w_next(w: float, e_budget: float, energy: float) -> float:
    """W' = max(W - E_budget + e, 0)."""
    return max(w - e_budget + energy, 0.0)


def update_virtual_queues(
    q: QueueState,
    *,
    eta: int,
    d: int,
    gamma: float,
    energy: float,
    arrival: int,
    lambda_or_obs: float,
    e_budget: float,
    t_inter: int,
) -> QueueState:
    """Advance the virtual queues Z, W and the waiting-time counter H.

    H follows the occupied/empty rule: when the queue holds a task,
    H' = max(H + 1 - (eta + d) * T, 0) with T the realized inter-arrival
    time between the head and the next task; when empty, H' = arrival. On
    realized traces this coincides with recomputing H from timestamps
    (see update_physical_queue).
    """
    if q.q_len > 0:
        h = max(q.h + 1 - (eta + d) * t_inter, 0)
    else:
        h = int(arrival)
    return replace(
        q,
        z=z_next(q.z, lambda_or_obs, d, gamma),
        w=w_next(q.w, e_budget, energy),
        h=h,
    )


# ---------------------------------------------------------------------------
# Per-slot decisions
# ---------------------------------------------------------------------------


@dataclass
class SlotDecision:
    """One slot's control output: serve matrix, drops and auxiliary variables.

    ``b[n, m] = 1`` means the head task of BS n is served by BS m this slot.
    ``eta`` (tasks leaving each queue by service) and ``mu`` (per-BS serving
    activity) are row and column sums of ``b``.
    """

    b: np.ndarray  # (N, N) int8
    d: np.ndarray  # (N,) int8
    gamma: np.ndarray  # (N,) float
    energy: np.ndarray  # (N,) float

    @property
    def eta(self) -> np.ndarray:
        return self.b.sum(axis=1)

    @property
    def mu(self) -> np.ndarray:
        return self.b.sum(axis=0)

    @classmethod
    def empty(cls, n: int) -> "SlotDecision":
        return cls(
            b=np.zeros((n, n), dtype=np.int8),
            d=np.zeros(n, dtype=np.int8),
            gamma=np.zeros(n),
            energy=np.zeros(n),
        )


def decision_energy(b: np.ndarray, stations: list[StationConfig]) -> np.ndarray:
    """Per-BS slot energy implied by the serving activity of ``b``."""
    mu = b.sum(axis=0)
    return np.array([energy_of_slot(st, int(m > 0)) for st, m in zip(stations, mu)])


def validate_slot_decision(dec: SlotDecision, queues: list[QueueState], peer_mask: np.ndarray):
    """Assert the structural constraints every schedule must satisfy."""
    eta = dec.eta
    assert np.all(eta <= 1), "a queue released more than one task by service"
    assert np.all(dec.b.sum(axis=0) <= 1), "a BS served more than one task"
    assert np.all(eta + dec.d <= 1), "a queue released more than one task"
    rows, cols = np.nonzero(dec.b)
    for n, m in zip(rows, cols):
        assert peer_mask[n, m], f"serve {n}->{m} crosses a non-peer edge"
        assert queues[n].q_len > 0, f"serve from empty queue at BS {n}"
