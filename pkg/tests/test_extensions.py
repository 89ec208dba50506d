import logging

import numpy as np
import pytest

from helpers import station

from mecsim.extensions import (
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
from mecsim.model import SlotDecision


def _decision(n, drops=(), serves=()):
    dec = SlotDecision.empty(n)
    for i in drops:
        dec.d[i] = 1
    for i, m in serves:
        dec.b[i, m] = 1
    return dec


def _mask(n):
    return np.ones((n, n), dtype=bool)


# --- early refuse ------------------------------------------------------------


def test_no_drops_leaves_decision_unchanged():
    stations = [station(i, 0.4) for i in range(2)]
    ledger = RefuseLedger(n=2, credit_cap=12)
    dec = _decision(2)
    phys = early_refuse_apply(dec, ledger, _mask(2), stations)
    assert phys.b.sum() == 0 and phys.d.sum() == 0
    assert ledger.block_credits.sum() == 0


def test_drop_substituted_by_idle_peer():
    stations = [station(i, 0.4) for i in range(2)]
    ledger = RefuseLedger(n=2, credit_cap=12)
    dec = _decision(2, drops=[0])
    phys = early_refuse_apply(dec, ledger, _mask(2), stations)
    assert phys.b[0, 1] == 1  # BS 1 stands in
    assert phys.d[0] == 0
    assert ledger.block_credits[0] == 1
    assert list(ledger.pending_chains[0]) == [1]


def test_credit_cap_falls_back_to_plain_drop():
    stations = [station(i, 0.4) for i in range(2)]
    ledger = RefuseLedger(n=2, credit_cap=1)
    ledger.block_credits[0] = 1
    dec = _decision(2, drops=[0])
    phys = early_refuse_apply(dec, ledger, _mask(2), stations)
    assert phys.d[0] == 1
    assert ledger.overflow_drops == 1


def test_no_idle_peer_falls_back():
    stations = [station(i, 0.4) for i in range(2)]
    ledger = RefuseLedger(n=2, credit_cap=12)
    mask = np.eye(2, dtype=bool)  # no cross links
    dec = _decision(2, drops=[0], serves=[(1, 0)])  # BS 0 busy serving BS 1
    phys = early_refuse_apply(dec, ledger, mask, stations)
    assert phys.d[0] == 1
    assert ledger.fallback_drops == 1


def test_blocking_and_compensation_cycle():
    ledger = RefuseLedger(n=3, credit_cap=12)
    ledger.block_credits[0] = 1
    ledger.pending_chains[0].append(2)  # BS 2 stood in earlier
    creditor = consume_block_credit(ledger, 0)
    assert creditor == 2
    assert ledger.block_credits[0] == 0
    # the phantom is later control-served by BS 1: BS 1 owes BS 2
    note_phantom_served(ledger, server=1, creditor=creditor)
    assert ledger.owed[1, 2] == 1
    # settle: BS 2 is control-serving BS 0's task, BS 1 idle -> reroute
    phys_b = np.zeros((3, 3), dtype=np.int8)
    phys_b[0, 2] = 1
    settle_owed(phys_b, ledger, _mask(3))
    assert phys_b[0, 1] == 1 and phys_b[0, 2] == 0
    assert ledger.owed.sum() == 0


def test_phantom_drop_reissues_credit():
    ledger = RefuseLedger(n=2, credit_cap=12)
    note_phantom_dropped(ledger, 0, creditor=1)
    assert ledger.block_credits[0] == 1
    assert list(ledger.pending_chains[0]) == [1]


# --- class partitioning ------------------------------------------------------


def test_single_class_covers_everything():
    stations = [station(0, 0.4)]
    plan = class_partition_and_budget([5e6, 3e6, 7e6], 1, stations)
    assert plan.k == 1
    assert plan.classify(2.9e6) == 0 and plan.classify(7.1e6) == 0
    assert plan.budgets[0, 0] == pytest.approx(stations[0].e_budget)


def test_uniform_quantile_boundaries():
    rng = np.random.default_rng(0)
    samples = rng.uniform(2.5e6, 7.5e6, size=200_000)
    stations = [station(0, 0.4)]
    plan = class_partition_and_budget(samples, 5, stations, workload_range=(2.5e6, 7.5e6))
    inner = plan.edges[1:-1]
    assert inner == pytest.approx([3.5e6, 4.5e6, 5.5e6, 6.5e6], rel=0.01)


def test_equal_loads_split_budget_evenly():
    stations = [station(0, 0.4, cpu_rate=2e7), station(1, 0.6, cpu_rate=2e7)]
    budgets = split_budgets(stations, np.full(4, 1.0))
    for n, st in enumerate(stations):
        assert budgets[n] == pytest.approx([st.e_budget / 4] * 4)
        assert budgets[n].sum() == pytest.approx(st.e_budget)


def test_budget_split_never_exceeds_station_budget():
    rng = np.random.default_rng(3)
    stations = [station(i, c) for i, c in enumerate(rng.uniform(0.1, 0.9, 5))]
    for _ in range(50):
        shares = rng.uniform(0, 5, size=4)
        budgets = split_budgets(stations, shares)
        for n, st in enumerate(stations):
            assert budgets[n].sum() <= st.e_budget + 1e-12


def test_class_station_caps_sum_to_substrate_cap():
    st = station(0, 0.4)
    plan = class_partition_and_budget([1.0, 2.0, 3.0, 4.0], 4, [st])
    caps = [class_station(st, plan, c, 0).service_cap for c in range(plan.k)]
    assert sum(caps) == pytest.approx(st.service_cap)


def test_degrades_when_k_exceeds_distinct_samples(caplog):
    stations = [station(0, 0.4)]
    with caplog.at_level(logging.WARNING):
        plan = class_partition_and_budget([5e6, 5e6, 5e6], 4, stations)
    assert plan.k == 1
    assert any("degrading" in rec.message for rec in caplog.records)


# --- capacity multiplexing ---------------------------------------------------


def test_all_requests_fit():
    completed, carry, executed = multiplex_classes(
        [(0, 8e6, "a"), (1, 8e6, "b")], cpu_rate=20e6
    )
    assert completed == ["a", "b"]
    assert carry == []
    assert executed == pytest.approx(16e6)


def test_contention_carries_remainder_in_class_order():
    reqs = [(c, u, f"t{c}") for c, u in enumerate((3.5e6, 4.5e6, 5.5e6, 6.5e6, 7.5e6))]
    completed, carry, executed = multiplex_classes(reqs, cpu_rate=20e6)
    assert completed == ["t0", "t1", "t2", "t3"]  # cumulative 20M exactly
    assert len(carry) == 1 and carry[0][0] == "t4"
    assert carry[0][1] == pytest.approx(7.5e6)
    assert executed == pytest.approx(20e6)


def test_carryover_executes_before_new_requests():
    completed, carry, _ = multiplex_classes(
        [(0, 15e6, "new")], cpu_rate=20e6, carryover=[("old", 10e6)]
    )
    assert completed == ["old"]
    assert carry[0][0] == "new"
    assert carry[0][1] == pytest.approx(5e6)


def test_no_requests():
    completed, carry, executed = multiplex_classes([], cpu_rate=20e6)
    assert completed == [] and carry == [] and executed == 0.0


def test_never_exceeds_cpu_rate():
    rng = np.random.default_rng(1)
    carry = []
    for _ in range(200):
        reqs = [
            (c, float(rng.uniform(1e6, 9e6)), object()) for c in range(rng.integers(0, 5))
        ]
        _, carry, executed = multiplex_classes(reqs, cpu_rate=12e6, carryover=carry)
        assert executed <= 12e6 + 1e-6


# --- violation monitor -------------------------------------------------------


def test_quiet_trace_has_no_edge_region():
    stats = violation_stats([3, 5, 2, 8], h_max=12, t_values=range(1, 5))
    assert stats.p_e == 0.0
    assert stats.p_v_given_e is None
    assert stats.decay_slope is None


def test_counting_by_definition():
    stats = violation_stats([12, 13, 13, 12, 15, 12], h_max=12, t_values=[1, 3])
    assert stats.p_e == pytest.approx(1.0)
    # slots at or above h_max + 1 = 13: three of six edge slots
    assert stats.p_v_given_e[1] == pytest.approx(3 / 6)
    assert stats.p_v_given_e[3] == pytest.approx(1 / 6)


def test_geometric_tail_fits_negative_slope():
    rng = np.random.default_rng(5)
    # exceedances with a geometric tail above the bound
    trace = 12 + rng.geometric(0.45, size=40_000) - 1
    stats = violation_stats(trace, h_max=12, t_values=range(1, 11))
    pv = [stats.p_v_given_e[t] for t in range(1, 11)]
    assert all(a >= b - 1e-12 for a, b in zip(pv, pv[1:]))  # non-increasing
    assert stats.decay_slope < 0
    assert stats.r_squared > 0.95
