import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgepipe.errors import IncompleteTable, TooLarge
from edgepipe.lanes import ProfileTable
from edgepipe.scheduler import (
    AllocationPlan,
    allocate,
    brute_force_allocate,
    default_epsilon,
    is_valid,
    makespan,
    max_iterations,
)

from oracles import best_split


def table_of(*rows):
    return ProfileTable.from_times({j: list(r) for j, r in enumerate(rows)})


def random_table(rng, M, K):
    rows = []
    for _ in range(M):
        b = math.exp(rng.uniform(math.log(0.2), math.log(5)))
        rows.append(list(rng.uniform(0, 5) + np.cumsum(b * rng.uniform(0.5, 1.5, K))))
    return table_of(*rows)


@st.composite
def monotone_tables(draw, max_m=4, max_k=12):
    M = draw(st.integers(1, max_m))
    K = draw(st.integers(1, max_k))
    rows = []
    for _ in range(M):
        base = draw(st.floats(0.01, 10))
        steps = draw(st.lists(st.floats(0, 5), min_size=K - 1, max_size=K - 1))
        rows.append(list(np.cumsum([base] + steps)))
    return table_of(*rows), K


# -- is_valid ----------------------------------------------------------------


def test_is_valid_single_lane_full_k():
    ok, picks = is_valid(4, 4, table_of([1, 2, 3, 4]), 0.5)
    assert ok and picks == [(0, 4)]


def test_is_valid_two_linear_lanes():
    t = table_of(range(1, 13), range(1, 13))
    ok, picks = is_valid(6, 12, t, 0.5)
    assert ok and picks == [(0, 6), (1, 6)]
    ok, picks = is_valid(2, 12, t, 0.5)
    assert not ok and picks == [(0, 2), (1, 2)]


def test_is_valid_bypasses_lanes_far_from_mid():
    ok, picks = is_valid(3, 4, table_of([1, 2, 3, 4], [10, 11, 12, 13]), 0.5)
    assert picks == [(0, 3), (1, 0)]
    assert not ok


def test_is_valid_ties_go_to_smaller_k():
    _, picks = is_valid(2.5, 4, table_of([1, 2, 3, 4]), 1.0)
    assert picks == [(0, 2)]


# -- allocate ----------------------------------------------------------------


def test_single_lane_gets_everything():
    t = table_of([1, 2, 3, 5])
    plan = allocate(t, 4)
    assert plan.entries == [(0, 4)]
    assert plan.makespan_ms == 5


def test_two_linear_lanes_split_evenly():
    t = table_of(range(1, 13), range(1, 13))
    plan = allocate(t, 12, epsilon=0.5, sigma=0.25)
    assert plan.entries == [(0, 6), (1, 6)]
    assert plan.makespan_ms == 6
    assert brute_force_allocate(t).makespan_ms == 6


def test_dominated_lane_is_dropped():
    cpu = [1.0 * k for k in range(1, 13)]
    metal = [3 + 0.5 * k for k in range(1, 13)]
    opencl = [40 + 6.0 * k for k in range(1, 13)]
    plan = allocate(table_of(cpu, metal, opencl), 12)
    assert plan.counts()[2] == 0
    assert plan.total_heads == 12


def test_trim_removes_surplus_from_slowest_lane():
    # mid lands where both lanes pick 3 heads: 6 > K=5, TRIM takes one from the slower lane
    t = table_of([1, 2, 3, 4, 5], [1, 2, 3.2, 4.2, 5.2])
    plan = allocate(t, 5, epsilon=1.0, sigma=0.1)
    assert plan.total_heads == 5
    assert plan.trimmed >= 1
    assert plan.makespan_ms <= min(t.T(0, 5), t.T(1, 5)) + 1.0


def test_fallback_when_nothing_is_valid():
    # tiny epsilon and a coarse step: the search probes 3.5, 5.6, 6.65 and steps past r=7
    t = table_of([1.0, 7.0], [1.5, 9.0])
    plan = allocate(t, 2, epsilon=0.01, sigma=0.7)
    assert plan.fallback
    assert plan.entries == [(0, 2), (1, 0)]
    assert plan.makespan_ms == 7.0


def test_defaults():
    t = table_of([2, 4, 6], [3, 6, 9])
    plan = allocate(t)
    assert plan.epsilon_ms == pytest.approx(0.05 * 6)
    assert plan.sigma_ms == pytest.approx(plan.epsilon_ms / 10)
    assert default_epsilon(t, 3) == pytest.approx(0.3)


def test_incomplete_table():
    t = table_of([1, 2, 3])
    with pytest.raises(IncompleteTable):
        allocate(t, 4)
    with pytest.raises(IncompleteTable):
        allocate(t, 3, M=2)
    with pytest.raises(ValueError):
        allocate(t, 3, epsilon=-1)


def test_plan_json():
    t = table_of([1, 2, 3, 4], [2, 3, 4, 5])
    plan = allocate(t, 4)
    doc = plan.to_json()
    assert set(doc) == {"epsilon_ms", "sigma_ms", "entries", "makespan_ms"}
    back = AllocationPlan.from_json(doc)
    assert back.entries == plan.entries and back.makespan_ms == plan.makespan_ms
    assert makespan(t, back.entries) == plan.makespan_ms


def test_execution_plan_uses_profiled_modes():
    t = ProfileTable.from_times({0: [1, 2, 3], 1: [1, 2, 3]}, modes={0: ["fused"] * 3, 1: ["per_head"] * 3})
    ex = AllocationPlan([(0, 1), (1, 2)], 2.0).execution_plan(t)
    assert [(s.lane_id, s.lo, s.hi, s.mode) for s in ex.segments] == [(0, 0, 1, "fused"), (1, 1, 3, "per_head")]


# -- brute force -------------------------------------------------------------


def test_brute_force_single_lane():
    assert brute_force_allocate(table_of([1, 2, 3])).entries == [(0, 3)]


def test_brute_force_fast_lane_takes_all():
    t = table_of([1, 2, 3, 4], [10, 20, 30, 40])
    plan = brute_force_allocate(t, 4)
    assert plan.entries == [(0, 4), (1, 0)]
    assert plan.makespan_ms == 4 == best_split([[1, 2, 3, 4], [10, 20, 30, 40]], 4)


def test_brute_force_tie_break_is_lexicographic():
    t = table_of([1, 1, 1, 1], [1, 1, 1, 1])
    assert brute_force_allocate(t, 4).entries == [(0, 0), (1, 4)]


def test_brute_force_guard():
    t = ProfileTable.from_times({j: list(range(1, 41)) for j in range(8)})
    with pytest.raises(TooLarge):
        brute_force_allocate(t, 40)


@settings(max_examples=200, deadline=None)
@given(monotone_tables())
def test_brute_force_matches_independent_enumeration(tk):
    t, K = tk
    rows = [t.ms[j] for j in t.lane_ids]
    assert brute_force_allocate(t, K).makespan_ms == pytest.approx(best_split(rows, K))


# -- properties --------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(monotone_tables())
def test_feasible_bounded_and_sandwiched(tk):
    t, K = tk
    plan = allocate(t, K)
    assert plan.total_heads == K
    assert all(k >= 0 for _, k in plan.entries)
    assert sorted(j for j, _ in plan.entries) == t.lane_ids
    assert plan.makespan_ms == makespan(t, plan.entries)
    assert plan.makespan_ms <= min(t.T(j, K) for j in t.lane_ids) + plan.epsilon_ms + 1e-9
    assert brute_force_allocate(t, K).makespan_ms <= plan.makespan_ms + 1e-12
    assert plan.iterations <= max_iterations(t, K, plan.sigma_ms)


@settings(max_examples=100, deadline=None)
@given(monotone_tables(), st.floats(0.001, 3), st.floats(0.001, 1))
def test_termination_bound_any_parameters(tk, eps, sigma):
    t, K = tk
    plan = allocate(t, K, epsilon=eps, sigma=sigma)
    assert plan.iterations <= max_iterations(t, K, sigma)
    assert plan.total_heads == K


def test_quality_on_random_tables():
    rng = np.random.default_rng(2024)
    ratios = []
    for _ in range(300):
        M, K = int(rng.integers(1, 5)), int(rng.integers(1, 13))
        t = random_table(rng, M, K)
        ratios.append(allocate(t, K).makespan_ms / brute_force_allocate(t, K).makespan_ms)
    assert np.mean(ratios) <= 1.25
    assert max(ratios) <= 2.0
