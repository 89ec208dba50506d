"""Task arrival generation.

Three processes are supported:

* per-BS Bernoulli coin flips (abstract unit tasks, one giant per hit);
* user groups emitting Poisson request streams, each request attaching to a
  uniformly random BS within reach;
* the same geometry with a two-state burst chain per group (requests flow
  at ``on_rate`` only while the chain is on).

Raw requests carry a workload in CPU cycles; the engine bins all requests
landing on the same BS (and workload class) in one slot into a single giant
task.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .model import ConfigurationError


@dataclass
class BernoulliPerBS:
    """Independent arrival coin per BS per slot; tasks are one full slot of work."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ConfigurationError("bernoulli probabilities must lie in [0, 1]")


@dataclass
class UserGroup:
    """A cluster of users: request rate per slot and the BSs within reach."""

    position: Optional[tuple[float, float]]
    rate: float
    candidates: list[int]

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigurationError("group rate must be >= 0")
        if not self.candidates:
            raise ConfigurationError(
                f"user group at {self.position} has no BS within reach"
            )


@dataclass
class UserGroupPoisson:
    groups: list[UserGroup]


@dataclass
class MarkovBurst:
    """Bursty variant: per-group on/off chain gating a Poisson request stream."""

    groups: list[UserGroup]  # group.rate is the on-state rate
    p_on_off: float = 0.05
    p_off_on: float = 0.05

    def __post_init__(self):
        for p in (self.p_on_off, self.p_off_on):
            if not 0 <= p <= 1:
                raise ConfigurationError("chain transition probabilities must lie in [0, 1]")

    @property
    def stationary_on(self) -> float:
        denom = self.p_on_off + self.p_off_on
        return self.p_off_on / denom if denom > 0 else 1.0


ArrivalProcess = Union[BernoulliPerBS, UserGroupPoisson, MarkovBurst]


@dataclass
class ArrivalState:
    """Mutable per-run process state (burst chain phases)."""

    on: np.ndarray | None = None

    @classmethod
    def fresh(cls, proc: ArrivalProcess, rng: np.random.Generator) -> "ArrivalState":
        if isinstance(proc, MarkovBurst):
            on = rng.random(len(proc.groups)) < proc.stationary_on
            return cls(on=on)
        return cls()


def generate_requests(
    proc: ArrivalProcess,
    state: ArrivalState,
    rng: np.random.Generator,
    workload_sampler=None,
) -> list[tuple[int, float | None]]:
    """Raw task requests for one slot: (bs index, workload cycles) pairs.

    Bernoulli tasks have no sampled workload (None = one full slot of CPU).
    Burst chains advance inside ``state``.
    """
    requests: list[tuple[int, float | None]] = []
    if isinstance(proc, BernoulliPerBS):
        hits = np.nonzero(rng.random(len(proc.p)) < proc.p)[0]
        for n in hits:
            requests.append((int(n), None))
        return requests

    if isinstance(proc, UserGroupPoisson):
        groups = proc.groups
        counts = rng.poisson([g.rate for g in groups])
    else:  # MarkovBurst
        groups = proc.groups
        rates = np.where(state.on, [g.rate for g in groups], 0.0)
        counts = rng.poisson(rates)
        flips = rng.random(len(groups))
        state.on = np.where(
            state.on, flips >= proc.p_on_off, flips < proc.p_off_on
        )
    for g, count in zip(groups, counts):
        for _ in range(int(count)):
            bs = g.candidates[int(rng.integers(len(g.candidates)))]
            w = float(workload_sampler(rng)) if workload_sampler else None
            requests.append((bs, w))
    return requests


def per_bs_request_rates(proc: ArrivalProcess, n_stations: int) -> np.ndarray:
    """Long-run raw request rate per BS per slot."""
    rates = np.zeros(n_stations)
    if isinstance(proc, BernoulliPerBS):
        return proc.p.copy()
    if isinstance(proc, UserGroupPoisson):
        groups = [(g, g.rate) for g in proc.groups]
    else:
        groups = [(g, g.rate * proc.stationary_on) for g in proc.groups]
    for g, rate in groups:
        for bs in g.candidates:
            rates[bs] += rate / len(g.candidates)
    return rates


def giant_arrival_rates(
    proc: ArrivalProcess, n_stations: int, class_probs: np.ndarray
) -> np.ndarray:
    """Per-BS, per-class probability of at least one request in a slot.

    ``class_probs[k]`` is the probability a request's workload falls in
    class k. Poisson thinning gives 1 - exp(-rate_k) per class; Bernoulli
    tasks all land in the class holding a full-slot workload (the caller
    passes a one-hot ``class_probs`` in that case). Burst processes use
    their stationary rate, so this is the long-run mean for them.
    """
    k = len(class_probs)
    rates = per_bs_request_rates(proc, n_stations)
    lam = np.zeros((n_stations, k))
    if isinstance(proc, BernoulliPerBS):
        cls = int(np.argmax(class_probs))
        lam[:, cls] = rates
        return lam
    for c in range(k):
        lam[:, c] = 1.0 - np.exp(-rates * class_probs[c])
    return lam
