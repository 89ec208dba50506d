"""Shared generators and oracles for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from mecsim.known_rate import OffloadPlan, PkSolution, build_plan, solve_pk
from mecsim.model import InfeasibleError, Linear, StationConfig


def station(idx, cap, slope=1.0, cpu_rate=1.0):
    """Unit-energy station whose service cap is exactly ``cap``."""
    return StationConfig(
        id=idx,
        cpu_rate=cpu_rate,
        e_static=0.0,
        e_active=1.0,
        e_budget=float(cap),
        utility=Linear(float(slope)),
    )


def random_known_rate_instance(rng, n, max_resamples=50):
    """Random (stations, lam, sol, plan) with a per-slot-feasible plan.

    A minority of raw draws admit no per-slot plan (a station's target
    service can exceed what its index window can supply); those are
    resampled and counted.
    """
    resamples = 0
    while True:
        lam = rng.uniform(0.05, 0.95, size=n)
        caps = rng.uniform(0.05, 0.95, size=n)
        slopes = rng.uniform(0.5, 2.0, size=n)
        stations = [station(j, caps[j], slopes[j]) for j in range(n)]
        sol = solve_pk(stations, lam)
        try:
            plan = build_plan(sol)
        except InfeasibleError:
            resamples += 1
            if resamples > max_resamples:
                raise
            continue
        return stations, lam, sol, plan, resamples


def exact_final_expectations(sol: PkSolution, plan: OffloadPlan) -> np.ndarray:
    """Exact E(A^N) by enumerating arrival patterns and coin branches.

    Independent of both the plan calibrations: it replays the executor's
    swap semantics over the full joint distribution.
    """
    n = len(sol.y_star)
    dist: dict[tuple, float] = {}
    for bits in itertools.product([0, 1], repeat=n):
        p = 1.0
        for j, b in enumerate(bits):
            pj = sol.y_star[j]
            p *= pj if b else (1 - pj)
        if p > 0:
            dist[bits] = dist.get(bits, 0.0) + p
    for step in plan.steps:
        if step.case == 1:
            continue
        new: dict[tuple, float] = {}

        def add(pattern, prob):
            new[pattern] = new.get(pattern, 0.0) + prob

        i, m, pr = step.i, step.m, step.prob
        for pattern, prob in dist.items():
            a = list(pattern)
            if step.case == 2:
                if a[i] == 1:
                    add(pattern, prob)
                    continue
                p_idx = next((p for p in range(i + 1, m + 1) if a[p] == 1), None)
                if p_idx is None:
                    add(pattern, prob)
                    continue
                if p_idx < m:
                    a[i], a[p_idx] = a[p_idx], a[i]
                    add(tuple(a), prob)
                    continue
                a[i], a[m] = a[m], a[i]
                add(tuple(a), prob * pr)
                add(pattern, prob * (1 - pr))
            else:
                if a[i] == 0:
                    add(pattern, prob)
                    continue
                p_idx = next((p for p in range(i + 1, m + 1) if a[p] == 0), None)
                if p_idx is None:
                    add(pattern, prob)
                    continue
                a[i], a[p_idx] = a[p_idx], a[i]
                add(tuple(a), prob * pr)
                add(pattern, prob * (1 - pr))
        dist = new
    expect = np.zeros(n)
    for pattern, prob in dist.items():
        expect += prob * np.array(pattern)
    return expect


def brute_force_max_assignment(w: np.ndarray, forbidden: np.ndarray | None = None) -> float:
    """Max total weight over all row->column permutations (small n only)."""
    n = w.shape[0]
    best = -np.inf
    for perm in itertools.permutations(range(n)):
        total = 0.0
        ok = True
        for i, j in enumerate(perm):
            if forbidden is not None and forbidden[i, j]:
                ok = False
                break
            total += w[i, j]
        if ok and total > best:
            best = total
    return best
