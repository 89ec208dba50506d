"""Exact maximum-weight assignment and per-slot schedule construction.

The scheduling subproblem "which queue's head task does each BS serve this
slot" reduces to a square assignment problem once negative pairing weights
are clamped to zero. The solve itself is delegated to
``scipy.optimize.linear_sum_assignment`` (Jonker-Volgenant, O(n^3), exact on
real weights); this module owns forbidden-entry handling, tie normalization
and the weight-matrix construction from queue state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import InfeasibleError, QueueState, StationConfig

_TIE_TOL = 1e-9


@dataclass
class WeightMatrix:
    """Square real weights with a mask of unusable entries."""

    w: np.ndarray
    forbidden: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.forbidden = np.asarray(self.forbidden, dtype=bool)
        n = self.w.shape[0]
        if self.w.shape != (n, n) or self.forbidden.shape != (n, n):
            raise ValueError("weights and forbidden mask must be square and congruent")
        if not np.all(np.isfinite(self.w[~self.forbidden])):
            raise ValueError("allowed weights must be finite")

    @property
    def n(self) -> int:
        return self.w.shape[0]


def _lex_normalize(w: np.ndarray, assign: list, forbidden: np.ndarray):
    """Swap assigned columns toward lexicographically smaller permutations
    whenever the exchange is weight-neutral (tolerance 1e-9) and allowed."""
    n = len(assign)
    changed = True
    passes = 0
    while changed and passes < n:
        changed = False
        passes += 1
        for i in range(n):
            if assign[i] is None:
                continue
            for j in range(i + 1, n):
                if assign[j] is None or assign[j] >= assign[i]:
                    continue
                ci, cj = assign[i], assign[j]
                if forbidden[i, cj] or forbidden[j, ci]:
                    continue
                if abs((w[i, cj] + w[j, ci]) - (w[i, ci] + w[j, cj])) <= _TIE_TOL:
                    assign[i], assign[j] = cj, ci
                    changed = True


def max_weight_assignment(m: WeightMatrix) -> tuple[list, float]:
    """Maximize total weight over row-to-column assignments.

    Returns (assign, total): ``assign[i]`` is the column matched to row i or
    None when the row can only be covered through forbidden entries (those
    rows are left unmatched and contribute nothing). Weight-neutral ties are
    normalized toward the lexicographically smallest assignment.
    """
    n = m.n
    if n == 0:
        return [], 0.0
    if np.all(m.forbidden):
        raise InfeasibleError("every entry of the assignment problem is forbidden")
    finite_max = float(np.abs(m.w[~m.forbidden]).max(initial=0.0))
    sentinel = -(finite_max + 1.0) * (2 * n + 2)
    w = np.where(m.forbidden, sentinel, m.w)
    rows, cols = linear_sum_assignment(w, maximize=True)
    assign: list = [None] * n
    for i, j in zip(rows, cols):
        if not m.forbidden[i, j]:
            assign[i] = int(j)
    _lex_normalize(m.w, assign, m.forbidden)
    total = float(sum(m.w[i, j] for i, j in enumerate(assign) if j is not None))
    return assign, total


def schedule_weights(
    queues: list[QueueState], stations: list[StationConfig], peer_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pairing weights for one slot and the mask of unusable pairs.

    w[n, m] = min(H_n, Z_n) - W_m * (e_active_m - e_static_m): the value of
    letting BS m serve the head task of BS n, discounted by m's energy debt.
    Pairs with an empty queue at n or without peer connectivity are forbidden.
    """
    n = len(queues)
    gain = np.array([min(q.h, q.z) for q in queues])
    cost = np.array([q.w * (st.e_active - st.e_static) for q, st in zip(queues, stations)])
    w = gain[:, None] - cost[None, :]
    empty = np.array([q.q_len == 0 for q in queues])
    forbidden = empty[:, None] | ~np.asarray(peer_mask, dtype=bool)
    return w, forbidden


def build_schedule(
    queues: list[QueueState], stations: list[StationConfig], peer_mask: np.ndarray
) -> np.ndarray:
    """Serve matrix b for one slot: b[n, m] = 1 if BS m serves BS n's head.

    Negative weights are clamped to zero for the assignment solve; matches
    whose original weight is not strictly positive are discarded, so an empty
    schedule is a valid outcome.
    """
    n = len(queues)
    b = np.zeros((n, n), dtype=np.int8)
    w, forbidden = schedule_weights(queues, stations, peer_mask)
    if np.all(forbidden):
        return b
    clamped = np.where(forbidden, 0.0, np.maximum(w, 0.0))
    assign, _ = max_weight_assignment(WeightMatrix(w=clamped, forbidden=forbidden))
    for row, col in enumerate(assign):
        if col is not None and w[row, col] > 0.0:
            b[row, col] = 1
    return b
