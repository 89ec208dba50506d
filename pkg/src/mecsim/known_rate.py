"""Offloading plan for the case where per-BS task arrival rates are known.

Two pieces:

1. ``solve_pk``: maximize sum_n g_n(y_n) over target throughputs y and
   service levels mu subject to y_n <= lambda_n, 0 <= mu_n <= cap_n and
   sum(y) == sum(mu), where cap_n is the energy-induced service cap.

2. The per-slot randomized offloader: a drop rule thins arrivals to the
   target throughput, then N sequential steps swap tasks between BSs so
   that after step i the expected number of tasks held by BS i equals
   mu*_i. Each step pulls tasks in from (or pushes them out to) a
   contiguous index window, randomizing only at the window boundary.

The step windows and boundary probabilities are precomputed once per
instance (``build_plan``) and replayed per slot or, vectorized, over a
whole horizon (``run_known_rate_batch``).

Two calibrations of the step probabilities are available. The
closed-form "product" tracking treats the assignment components as
independent after every step; that assumption is not actually preserved
by the swaps, and the resulting final expectations can deviate from the
targets by a few percent on unlucky instances. The "exact" calibration
keeps the identical per-slot control structure but computes each step's
window and boundary probability from the exactly-tracked joint
distribution of the remaining components, which pins every final
expectation to its target. Exact tracking enumerates suffix patterns and
is used automatically for instances up to EXACT_TRACKING_MAX_N stations;
larger instances fall back to product tracking.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ConfigurationError,
    ContractViolationError,
    InfeasibleError,
    Linear,
    Log,
    PiecewiseLinearConcave,
    StationConfig,
    Utility,
    utility_eval,
    utility_nu,
)

_PROB_TOL = 1e-9
_BUDGET_TOL = 1e-9


@dataclass
class PkSolution:
    """Optimal throughput/service split for a known-rate instance."""

    y_star: np.ndarray
    mu_star: np.ndarray
    z_star: float


# ---------------------------------------------------------------------------
# Concave program
# ---------------------------------------------------------------------------


def _piecewise_segments(utility: Utility, cap: float):
    """Yield (slope, length) segments of g on [0, cap] for linear-ish utilities."""
    if isinstance(utility, Linear):
        if cap > 0:
            yield utility.slope, cap
        return
    assert isinstance(utility, PiecewiseLinearConcave)
    slopes = utility.segment_slopes()
    xs = [p[0] for p in utility.points]
    for s, x1, x2 in zip(slopes, xs, xs[1:]):
        lo, hi = min(x1, cap), min(x2, cap)
        if hi > lo:
            yield s, hi - lo


def _allocate_greedy(utilities: list[Utility], upper: np.ndarray, budget: float) -> np.ndarray:
    """Exact budget allocation for piecewise-linear utilities.

    Fills whole segments in order of slope; ties broken by lower BS index.
    """
    segments = []  # (-slope, bs index, segment order, length)
    for n, (u, ub) in enumerate(zip(utilities, upper)):
        for k, (slope, length) in enumerate(_piecewise_segments(u, ub)):
            segments.append((-slope, n, k, length))
    segments.sort(key=lambda s: (s[0], s[1], s[2]))
    y = np.zeros(len(utilities))
    remaining = budget
    for _, n, _, length in segments:
        if remaining <= 0:
            break
        take = min(length, remaining)
        y[n] += take
        remaining -= take
    return y


def _marginal_fill(utility: Utility, theta: float, ub: float) -> float:
    """Largest y in [0, ub] whose marginal utility is still >= theta."""
    if isinstance(utility, Log):
        if theta <= 0:
            return ub
        return min(max(utility.scale / theta - 1.0, 0.0), ub)
    if isinstance(utility, Linear):
        return ub if utility.slope >= theta else 0.0
    assert isinstance(utility, PiecewiseLinearConcave)
    y = 0.0
    for slope, length in _piecewise_segments(utility, ub):
        if slope >= theta:
            y += length
        else:
            break
    return y


def _allocate_waterfill(utilities: list[Utility], upper: np.ndarray, budget: float) -> np.ndarray:
    """Bisection on the common marginal value; handles smooth utilities."""
    nus = [utility_nu(u) for u in utilities]
    lo, hi = 0.0, max(nus) + 1.0

    def total(theta):
        return sum(_marginal_fill(u, theta, ub) for u, ub in zip(utilities, upper))

    if total(hi) >= budget:  # budget beyond every marginal: take it all
        lo = hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) >= budget:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    theta = lo
    y = np.array([_marginal_fill(u, theta, ub) for u, ub in zip(utilities, upper)])
    # Discontinuous (linear) utilities can overshoot at the tie value; trim
    # tied stations by index order until the budget constraint is met.
    excess = y.sum() - budget
    if excess > _BUDGET_TOL:
        for n in reversed(range(len(y))):
            if excess <= _BUDGET_TOL:
                break
            cut = min(y[n], excess)
            y[n] -= cut
            excess -= cut
    return y


def solve_pk(stations: list[StationConfig], lam: np.ndarray) -> PkSolution:
    """Maximize sum_n g_n(y_n) s.t. y <= lambda, 0 <= mu <= cap, sum y == sum mu.

    Piecewise-linear instances are solved exactly by greedy segment filling;
    smooth (log) instances by water-filling bisection to 1e-9 on the budget.
    Service levels are then filled greedily up to per-station caps.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ConfigurationError("arrival rates must lie in [0, 1]")
    caps = np.array([st.service_cap for st in stations])
    utilities = [st.utility for st in stations]

    budget = min(lam.sum(), caps.sum())
    if all(isinstance(u, (Linear, PiecewiseLinearConcave)) for u in utilities):
        y = _allocate_greedy(utilities, lam, budget)
    else:
        y = _allocate_waterfill(utilities, lam, budget)
    assert abs(y.sum() - budget) <= 1e-6, "budget constraint missed"

    # Service split: start from mu = min(y, cap) so that most offloader steps
    # are pass-throughs, then push the capped stations' deficit onto spare
    # capacity greedily by index. Keeping mu close to y keeps the per-slot
    # offloading windows short and achievable.
    mu = np.minimum(y, caps)
    deficit = y.sum() - mu.sum()
    for n in range(len(caps)):
        if deficit <= _BUDGET_TOL:
            break
        take = min(caps[n] - mu[n], deficit)
        mu[n] += take
        deficit -= take
    assert deficit <= _BUDGET_TOL

    z = sum(utility_eval(u, min(v, 1.0)) for u, v in zip(utilities, y))
    return PkSolution(y_star=y, mu_star=mu, z_star=float(z))


# ---------------------------------------------------------------------------
# Drop rule
# ---------------------------------------------------------------------------


def drop_rule(a_n: int, lambda_n: float, y_star_n: float, rng: np.random.Generator) -> int:
    """Drop an arrived task with probability 1 - y*/lambda (accept to rate y*)."""
    if y_star_n > lambda_n + _PROB_TOL:
        raise ContractViolationError(f"y* ({y_star_n}) exceeds lambda ({lambda_n})")
    if a_n == 0:
        return 0
    if lambda_n <= 0:
        raise ContractViolationError("drop rule needs lambda > 0 when a task arrived")
    p_drop = 1.0 - y_star_n / lambda_n
    return int(rng.random() < p_drop)


# ---------------------------------------------------------------------------
# Plan construction (windows + boundary probabilities, expectation tracking)
# ---------------------------------------------------------------------------


@dataclass
class PlanStep:
    """Step i of the offloader: how BS i reaches its target expectation.

    case 1: pass-through. case 2: pull a task in from the first occupied BS
    in (i, m], randomizing with probability ``prob`` only when that BS is m.
    case 3: push BS i's task to the first idle BS in (i, m] with probability
    ``prob``.
    """

    i: int
    case: int
    m: int = -1
    prob: float = 1.0
    expect_before: np.ndarray | None = None


@dataclass
class OffloadPlan:
    steps: list[PlanStep] = field(default_factory=list)
    expect_final: np.ndarray | None = None


def _checked_prob(p: float) -> float:
    assert -_PROB_TOL <= p <= 1.0 + _PROB_TOL, f"probability {p} outside [0, 1]"
    return min(max(p, 0.0), 1.0)


def _plan_step(expect: np.ndarray, mu_star: np.ndarray, i: int) -> tuple[PlanStep, np.ndarray]:
    """Compute step i's window and probability and the post-step expectations."""
    n = len(expect)
    q = expect.copy()
    target = mu_star[i]
    if abs(q[i] - target) <= _PROB_TOL:
        return PlanStep(i=i, case=1, expect_before=expect.copy()), q

    if q[i] < target:
        # Pull in: smallest m with P(at least one task in i..m) >= target.
        none_prob = 1.0
        m = -1
        for j in range(i, n):
            none_prob *= 1.0 - q[j]
            if 1.0 - none_prob >= target - _PROB_TOL:
                m = j
                break
        if m < 0:
            raise InfeasibleError(
                f"step {i}: window cannot reach target expectation {target}"
            )
        prefix = np.cumprod([1.0 - q[j] for j in range(i, m)])  # up to m-1
        none_before_m = prefix[-1] if m > i else 1.0
        covered = 1.0 - none_before_m
        p_bound = _checked_prob((target - covered) / (none_before_m * q[m]))
        # Donor j loses its task exactly when it is the first occupied BS in
        # the window (boundary donor only with the boundary probability).
        run = 1.0 - q[i]
        for j in range(i + 1, m + 1):
            factor = p_bound if j == m else 1.0
            q[j] = q[j] - run * q[j] * factor
            run *= 1.0 - expect[j]
        q[i] = target
        return PlanStep(i=i, case=2, m=m, prob=p_bound, expect_before=expect.copy()), q

    # Push out: smallest m with P(all of i..m hold a task) <= target.
    all_prob = 1.0
    m = -1
    for j in range(i, n):
        all_prob *= q[j]
        if all_prob <= target + _PROB_TOL:
            m = j
            break
    if m < 0:
        raise InfeasibleError(f"step {i}: cannot shed expectation down to {target}")
    inner = np.prod([q[j] for j in range(i + 1, m + 1)])
    p_out = _checked_prob((q[i] - target) / (q[i] * (1.0 - inner)))
    # Receiver p gains when it is the first idle BS in (i, m] while i holds
    # a task; the same boundary probability applies to every receiver.
    run = q[i]
    for j in range(i + 1, m + 1):
        q[j] = q[j] + run * (1.0 - expect[j]) * p_out
        run *= expect[j]
    q[i] = target
    return PlanStep(i=i, case=3, m=m, prob=p_out, expect_before=expect.copy()), q


# Exact joint tracking enumerates up to 2**n suffix patterns.
EXACT_TRACKING_MAX_N = 16


class _SuffixJoint:
    """Exact distribution of assignment components i..N-1 before step i.

    Patterns are bitmasks over the remaining components (bit 0 = component
    ``base``); probabilities are kept sparse in a dict.
    """

    def __init__(self, base: int, n: int, probs: dict[int, float]):
        self.base = base
        self.n = n
        self.probs = probs

    @classmethod
    def independent(cls, marginals: np.ndarray) -> "_SuffixJoint":
        probs = {0: 1.0}
        for bit, p in enumerate(marginals):
            nxt: dict[int, float] = {}
            for pat, pr in probs.items():
                if p < 1.0:
                    nxt[pat] = nxt.get(pat, 0.0) + pr * (1.0 - p)
                if p > 0.0:
                    nxt[pat | (1 << bit)] = nxt.get(pat | (1 << bit), 0.0) + pr * p
            probs = nxt
        return cls(base=0, n=len(marginals), probs=probs)

    def _bit(self, j: int) -> int:
        return j - self.base

    def marginal(self, j: int) -> float:
        mask = 1 << self._bit(j)
        return sum(pr for pat, pr in self.probs.items() if pat & mask)

    def prob_pull_covered(self, i: int, m: int) -> float:
        """P(component i occupied, or some component in (i, m] occupied)."""
        bits = [self._bit(j) for j in range(i, m + 1)]
        mask = 0
        for b in bits:
            mask |= 1 << b
        return sum(pr for pat, pr in self.probs.items() if pat & mask)

    def prob_pull_boundary(self, i: int, m: int) -> float:
        """P(i..m-1 all idle and m occupied) -- the boundary-donor event."""
        idle_mask = 0
        for j in range(i, m):
            idle_mask |= 1 << self._bit(j)
        m_mask = 1 << self._bit(m)
        return sum(
            pr for pat, pr in self.probs.items() if not pat & idle_mask and pat & m_mask
        )

    def prob_push_blocked(self, i: int, m: int) -> float:
        """P(i occupied and all of (i, m] occupied) -- no shed possible."""
        mask = 0
        for j in range(i, m + 1):
            mask |= 1 << self._bit(j)
        return sum(pr for pat, pr in self.probs.items() if pat & mask == mask)

    def apply_step_and_freeze(self, step: "PlanStep"):
        """Push the distribution through step i, then drop component i."""
        i = step.i
        i_bit = self._bit(i)
        if step.case != 1:
            window = [self._bit(j) for j in range(i + 1, step.m + 1)]
            nxt: dict[int, float] = {}

            def add(pat, pr):
                nxt[pat] = nxt.get(pat, 0.0) + pr

            for pat, pr in self.probs.items():
                if step.case == 2:
                    if pat & (1 << i_bit):
                        add(pat, pr)
                        continue
                    p_bit = next((b for b in window if pat & (1 << b)), None)
                    if p_bit is None:
                        add(pat, pr)
                        continue
                    swapped = pat ^ (1 << i_bit) ^ (1 << p_bit)
                    if p_bit != self._bit(step.m):
                        add(swapped, pr)
                    else:
                        add(swapped, pr * step.prob)
                        if step.prob < 1.0:
                            add(pat, pr * (1.0 - step.prob))
                else:
                    if not pat & (1 << i_bit):
                        add(pat, pr)
                        continue
                    p_bit = next((b for b in window if not pat & (1 << b)), None)
                    if p_bit is None:
                        add(pat, pr)
                        continue
                    swapped = pat ^ (1 << i_bit) ^ (1 << p_bit)
                    add(swapped, pr * step.prob)
                    if step.prob < 1.0:
                        add(pat, pr * (1.0 - step.prob))
            self.probs = nxt
        # Marginalize component i out; remaining bits shift down by one.
        shifted: dict[int, float] = {}
        for pat, pr in self.probs.items():
            out = pat >> 1
            shifted[out] = shifted.get(out, 0.0) + pr
        self.probs = shifted
        self.base = i + 1


def _plan_step_exact(joint: _SuffixJoint, mu_star: np.ndarray, i: int) -> PlanStep:
    """Step i calibrated against the exact joint of the remaining components."""
    n = joint.n
    target = float(mu_star[i])
    q_i = joint.marginal(i)
    if abs(q_i - target) <= _PROB_TOL:
        return PlanStep(i=i, case=1)

    if q_i < target:
        m = -1
        for j in range(i, n):
            if joint.prob_pull_covered(i, j) >= target - _PROB_TOL:
                m = j
                break
        if m < 0:
            raise InfeasibleError(f"step {i}: window cannot reach target expectation {target}")
        covered = joint.prob_pull_covered(i, m - 1) if m > i else q_i
        boundary = joint.prob_pull_boundary(i, m)
        p_bound = _checked_prob((target - covered) / boundary) if boundary > 0 else 1.0
        return PlanStep(i=i, case=2, m=m, prob=p_bound)

    m = -1
    for j in range(i, n):
        if joint.prob_push_blocked(i, j) <= target + _PROB_TOL:
            m = j
            break
    if m < 0:
        raise InfeasibleError(f"step {i}: cannot shed expectation down to {target}")
    sheddable = q_i - joint.prob_push_blocked(i, m)  # P(i occupied, some idle in window)
    p_out = _checked_prob((q_i - target) / sheddable) if sheddable > 0 else 1.0
    return PlanStep(i=i, case=3, m=m, prob=p_out)


def build_plan(sol: PkSolution, method: str = "auto") -> OffloadPlan:
    """Precompute all N steps for an instance.

    method "product" uses the closed-form independence-based tracking,
    "exact" the joint-distribution calibration, "auto" picks exact for
    instances small enough to enumerate.
    """
    n = len(sol.y_star)
    if method not in ("auto", "product", "exact"):
        raise ValueError(f"unknown plan method {method!r}")
    if method == "exact" and n > EXACT_TRACKING_MAX_N:
        raise ValueError(f"exact tracking supports up to {EXACT_TRACKING_MAX_N} stations")
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_TRACKING_MAX_N)

    plan = OffloadPlan()
    if use_exact:
        joint = _SuffixJoint.independent(sol.y_star.astype(float))
        finals = np.zeros(n)
        for i in range(n):
            step = _plan_step_exact(joint, sol.mu_star, i)
            plan.steps.append(step)
            finals[i] = joint.marginal(i) if step.case == 1 else sol.mu_star[i]
            joint.apply_step_and_freeze(step)
        plan.expect_final = finals
        return plan

    expect = sol.y_star.astype(float).copy()
    for i in range(n):
        step, expect = _plan_step(expect, sol.mu_star, i)
        plan.steps.append(step)
    plan.expect_final = expect
    return plan


# ---------------------------------------------------------------------------
# Per-slot execution
# ---------------------------------------------------------------------------


@dataclass
class StepState:
    """Assignment vector and tracked expectations while folding the N steps."""

    a: np.ndarray
    expect: np.ndarray
    step_index: int = 0


def _apply_step(a: np.ndarray, step: PlanStep, rng: np.random.Generator) -> int | None:
    """Apply one plan step to an assignment vector in place.

    Returns the swapped partner index, or None if the vector is unchanged.
    """
    i = step.i
    if step.case == 1:
        return None
    if step.case == 2:
        if a[i] == 1:
            return None
        for p in range(i + 1, step.m + 1):
            if a[p] == 1:
                if p < step.m or rng.random() < step.prob:
                    a[i], a[p] = a[p], a[i]
                    return p
                return None
        return None
    # case 3
    if a[i] == 0:
        return None
    for p in range(i + 1, step.m + 1):
        if a[p] == 0:
            if rng.random() < step.prob:
                a[i], a[p] = a[p], a[i]
                return p
            return None
    return None


def known_rate_step(state: StepState, mu_star: np.ndarray, rng: np.random.Generator) -> StepState:
    """Execute step ``state.step_index`` and advance the tracked expectations."""
    step, expect_after = _plan_step(state.expect, np.asarray(mu_star, float), state.step_index)
    a = state.a.copy()
    _apply_step(a, step, rng)
    return StepState(a=a, expect=expect_after, step_index=state.step_index + 1)


def run_known_rate_slot(
    a_t: np.ndarray,
    lam: np.ndarray,
    sol: PkSolution,
    rng: np.random.Generator,
    plan: OffloadPlan | None = None,
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """One slot of the known-rate offloader.

    Returns (assignment A^N, drop vector D, origin): ``origin[m]`` is the BS
    whose task BS m ended up holding (-1 if none), tracked through the swaps.
    """
    a_t = np.asarray(a_t, dtype=np.int8)
    lam = np.asarray(lam, dtype=float)
    if plan is None:
        plan = build_plan(sol)
    n = len(a_t)
    d = np.zeros(n, dtype=np.int8)
    for j in range(n):
        if a_t[j] and lam[j] > 0:
            d[j] = drop_rule(int(a_t[j]), lam[j], sol.y_star[j], rng)
    a = (a_t - d).astype(np.int8)
    origin = [j if a[j] else -1 for j in range(n)]
    total0 = int(a.sum())
    for step in plan.steps:
        p = _apply_step(a, step, rng)
        if p is not None:
            origin[step.i], origin[p] = origin[p], origin[step.i]
        assert a.max(initial=0) <= 1, "assignment component exceeded 1"
        assert int(a.sum()) == total0, "task count not conserved across a step"
    return a, d, origin


# ---------------------------------------------------------------------------
# Vectorized horizon execution
# ---------------------------------------------------------------------------


def run_known_rate_batch(
    arrivals: np.ndarray,
    lam: np.ndarray,
    sol: PkSolution,
    rng: np.random.Generator,
    plan: OffloadPlan | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the offloader over a (T, N) arrival matrix in vectorized form.

    Returns (assignments (T, N), drops (T, N), origins (T, N)), where
    origins[t, m] is the origin BS of the task served by m (or -1).
    Semantically identical to folding run_known_rate_slot over slots; only
    the random-draw order differs.
    """
    arrivals = np.asarray(arrivals, dtype=np.int8)
    lam = np.asarray(lam, dtype=float)
    if plan is None:
        plan = build_plan(sol)
    t_total, n = arrivals.shape

    with np.errstate(divide="ignore", invalid="ignore"):
        p_drop = np.where(lam > 0, 1.0 - sol.y_star / np.maximum(lam, 1e-300), 0.0)
    drops = (arrivals == 1) & (rng.random((t_total, n)) < p_drop[None, :])
    drops = drops.astype(np.int8)
    a = arrivals - drops
    origin = np.where(a == 1, np.arange(n)[None, :], -1)

    totals = a.sum(axis=1)
    for step in plan.steps:
        i = step.i
        if step.case == 1 or step.m <= i:
            continue
        window = np.arange(i + 1, step.m + 1)
        if step.case == 2:
            candidates = a[:, i] == 0
            occ = a[np.ix_(np.arange(t_total), window)] == 1
            has = occ.any(axis=1) & candidates
            first = np.argmax(occ, axis=1)
            p_col = window[first]
            boundary = has & (p_col == step.m)
            inner = has & (p_col < step.m)
            do_swap = inner | (boundary & (rng.random(t_total) < step.prob))
        else:
            candidates = a[:, i] == 1
            idle = a[np.ix_(np.arange(t_total), window)] == 0
            has = idle.any(axis=1) & candidates
            first = np.argmax(idle, axis=1)
            p_col = window[first]
            do_swap = has & (rng.random(t_total) < step.prob)
        rows = np.nonzero(do_swap)[0]
        if rows.size:
            cols = p_col[rows]
            a[rows, i], a[rows, cols] = a[rows, cols], a[rows, i]
            origin[rows, i], origin[rows, cols] = origin[rows, cols], origin[rows, i]
        assert a.max(initial=0) <= 1
        assert np.array_equal(a.sum(axis=1), totals), "task count drifted in a step"
    return a, drops, origin
