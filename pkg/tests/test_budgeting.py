import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import constraint_holds, grid_budget, grid_budget_dense
from stallann.budgeting import (
    BudgetConfig,
    BudgetTable,
    IdleSample,
    is_feasible,
    solve_budget,
    solve_budget_ksparse,
)

EPS = 0.5
windows = st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=64)
thetas = st.floats(0, 0.5, allow_nan=False)


def test_frozen_fixtures(frozen):
    b = frozen["budget"]
    assert abs(solve_budget([100, 300], 0.1) - b["pair_theta_0.1"]) <= EPS
    assert abs(solve_budget_ksparse([100, 300], 0.1, 1) - b["pair_theta_0.1"]) <= EPS
    assert abs(solve_budget_ksparse([10, 10, 10, 100], 0.1, 4) - b["ksparse_4_theta_0.1"]) <= EPS
    assert abs(solve_budget([50, 100, 150], 0.0) - b["three_theta_0"]) <= EPS
    assert abs(solve_budget([80, 80, 80, 80], 0.0) - b["constant_theta_0"]) <= EPS


def test_oracle_reproduces_frozen(frozen):
    assert grid_budget([100, 300], 0.1) == frozen["budget"]["pair_theta_0.1"]
    assert grid_budget([10, 10, 10, 100], 0.1, 4) == frozen["budget"]["ksparse_4_theta_0.1"]


@pytest.mark.parametrize("k", [1, 2, 5])
def test_equal_samples_theta_zero(k):
    assert abs(solve_budget_ksparse([42.0] * 10, 0.0, k) - 42.0) <= EPS


def test_empty_samples_rejected():
    with pytest.raises(ValueError):
        solve_budget([], 0.1)
    with pytest.raises(ValueError):
        solve_budget_ksparse([], 0.1, 2)


@given(windows, thetas)
def test_feasible_and_maximal(samples, theta):
    b = solve_budget(samples, theta, EPS)
    assert constraint_holds(b, samples, theta)
    upper = max(max(samples), np.mean(samples) * (1 + theta))
    assert b + EPS > upper or not constraint_holds(b + EPS, samples, theta)


@settings(max_examples=60)
@given(windows, thetas, st.integers(1, 8))
def test_matches_grid_oracle(samples, theta, k):
    b = solve_budget_ksparse(samples, theta, k, EPS)
    assert is_feasible(b, samples, theta, k)
    assert abs(b - grid_budget(samples, theta, k)) <= EPS


@given(windows, thetas, thetas)
def test_monotone_in_theta(samples, t1, t2):
    lo, hi = sorted((t1, t2))
    assert solve_budget(samples, lo) <= solve_budget(samples, hi) + EPS


@given(windows, thetas, st.floats(0.1, 10))
def test_scale_equivariance(samples, theta, c):
    # equal up to the solver tolerance at both scales
    a = solve_budget([c * s for s in samples], theta, EPS)
    b = c * solve_budget(samples, theta, EPS)
    assert abs(a - b) <= EPS * (1 + c)


def test_idle_sample_validation():
    with pytest.raises(ValueError):
        IdleSample(-1.0, 1)
    with pytest.raises(ValueError):
        IdleSample(1.0, 0)


def test_window_eviction_and_routing():
    t = BudgetTable(BudgetConfig(window=4, min_samples=2, buckets=8))
    t.record_sample(IdleSample(5.0, 3))
    assert len(t.windows[2]) == 1
    for k in range(5):
        t.record_sample(IdleSample(float(k), 3))
    assert t.window_samples(3) == [1.0, 2.0, 3.0, 4.0]
    assert t.bucket(3) == 3 and t.bucket(20) == 8


def test_get_budget_undersampled_then_solved():
    cfg = BudgetConfig(theta=0.1, window=8, min_samples=4, resolve_period=1)
    t = BudgetTable(cfg)
    for x in (100, 300, 100):
        t.record_sample(IdleSample(x, 2))
    assert t.get_budget(2) is None
    t.record_sample(IdleSample(300, 2))
    assert abs(t.get_budget(2) - solve_budget([100, 300, 100, 300], 0.1)) <= 1e-9
    assert t.get_budget(1) is None


def test_clamp_to_last_bucket():
    t = BudgetTable(BudgetConfig(window=4, min_samples=1, buckets=2))
    t.record_sample(IdleSample(50, 7))
    assert t.get_budget(9) == t.get_budget(2) is not None


def test_resolve_period_amortizes():
    t = BudgetTable(BudgetConfig(theta=0.0, window=100, min_samples=2, resolve_period=3))
    for x in (10, 10):
        t.record_sample(IdleSample(x, 1))
    first = t.get_budget(1)
    t.record_sample(IdleSample(1, 1))
    assert t.get_budget(1) == first  # not re-solved yet
    t.record_sample(IdleSample(1, 1))
    t.record_sample(IdleSample(1, 1))
    assert t.get_budget(1) < first


def test_ksparse_mode_schedules_every_kth():
    t = BudgetTable(BudgetConfig(mode="k_sparse", k_sparse=4))
    assert [t.schedules(h) for h in range(8)] == [False, False, False, True] * 2
    assert BudgetTable().schedules(0)


def test_bad_config():
    with pytest.raises(ValueError):
        BudgetConfig(mode="sometimes")
    with pytest.raises(ValueError):
        BudgetConfig(window=4, min_samples=8)


@settings(max_examples=60)
@given(windows, thetas, st.integers(1, 8))
def test_dense_oracle_agrees_with_loop_oracle(samples, theta, k):
    assert grid_budget_dense(samples, theta, k) == pytest.approx(grid_budget(samples, theta, k), abs=1e-9)
