import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stallann.tuner import (
    EpochAccumulator,
    InsufficientSamples,
    LatencyObservation,
    Tuner,
    TunerConfig,
    TunerPhase,
    TunerState,
    effective_budget,
    step,
)

CFG = TunerConfig(theta=0.05, refresh_period=0)


def obs(mean, count=200, p95=None, p99=None):
    return LatencyObservation(mean=mean, count=count, p95=p95, p99=p99)


def steady(alpha=0.5, baseline=100.0, **kw):
    return TunerState(phase=TunerPhase.STEADY, alpha=alpha, baseline={"mean": baseline, **kw})


def test_steady_non_violation_increments_and_clamps():
    s, a = step(steady(0.5), obs(100.0), CFG)
    assert a == pytest.approx(0.52) and s.consecutive_violations == 0
    s, a = step(steady(0.99), obs(100.0), CFG)
    assert a == 1.0


def test_three_violations_rebaseline():
    s = steady(0.5)
    for r in (1.1, 1.12, 1.09):
        s, _ = step(s, obs(100.0 * r), CFG)
    assert s.phase is TunerPhase.REBASELINE
    assert s.effective_alpha == 0.0


def test_violation_counter_resets():
    s = steady(0.5)
    s, _ = step(s, obs(110.0), CFG)
    s, _ = step(s, obs(110.0), CFG)
    s, _ = step(s, obs(100.0), CFG)
    assert s.consecutive_violations == 0
    s, _ = step(s, obs(110.0), CFG)
    assert s.phase is TunerPhase.STEADY


def test_rebaseline_goes_to_recording():
    s = TunerState(phase=TunerPhase.REBASELINE, alpha=0.3)
    s, a = step(s, obs(100.0), CFG)
    assert s.phase is TunerPhase.RECORDING and a == 0.0


def test_recording_then_binary_search():
    s = TunerState()
    for _ in range(CFG.recording_epochs):
        s, a = step(s, obs(100.0), CFG)
        if s.phase is TunerPhase.RECORDING:
            assert a == 0.0
    assert s.phase is TunerPhase.BINARY_SEARCH
    assert s.baseline["mean"] == 100.0
    assert a == 0.5


def test_binary_search_bounded_epochs():
    # plant: ratio 1 + 0.1 alpha, theta 0.05 -> feasible alpha <= 0.5
    s = TunerState()
    for _ in range(CFG.recording_epochs):
        s, a = step(s, obs(100.0), CFG)
    n = 0
    while s.phase is TunerPhase.BINARY_SEARCH:
        s, a = step(s, obs(100.0 * (1 + 0.1 * a)), CFG)
        n += 1
    assert n <= math.ceil(math.log2(1 / CFG.alpha_resolution))
    assert s.phase is TunerPhase.STEADY
    assert 0.5 - CFG.alpha_resolution <= s.alpha <= 0.5


def test_infeasible_disables_coexecution():
    s = TunerState()
    for _ in range(CFG.recording_epochs):
        s, a = step(s, obs(100.0), CFG)
    while s.phase is TunerPhase.BINARY_SEARCH:
        s, a = step(s, obs(200.0), CFG)
    assert s.disabled and s.effective_alpha == 0.0


def test_insufficient_samples_rejected():
    with pytest.raises(InsufficientSamples):
        step(TunerState(), obs(100.0, count=3), CFG)


def test_multi_statistic_violation():
    cfg = TunerConfig(theta=0.05, statistics=("mean", "p99"), refresh_period=0)
    s = steady(0.5, p99=300.0)
    s2, _ = step(s, obs(100.0, p99=400.0), cfg)
    assert s2.consecutive_violations == 1 and s2.alpha < 0.5
    s3, _ = step(s, obs(100.0, p99=300.0), cfg)
    assert s3.alpha > 0.5


def test_refresh_suspends_one_epoch():
    cfg = TunerConfig(theta=0.05, refresh_period=2)
    s = steady(0.5)
    s, _ = step(s, obs(100.0), cfg)
    s, a = step(s, obs(100.0), cfg)
    assert s.refreshing and a == 0.0
    s, a = step(s, obs(90.0), cfg)
    assert not s.refreshing and s.baseline["mean"] == 90.0 and a > 0


def test_effective_budget():
    assert effective_budget(steady(0.0), 200.0) == 0.0
    assert effective_budget(steady(1.0), 200.0) == 200.0
    assert effective_budget(steady(0.595), 200.0) == pytest.approx(119.0)
    assert effective_budget(TunerState(alpha=0.7), 200.0) == 0.0  # recording
    with pytest.raises(ValueError):
        effective_budget(steady(0.5), -1)


def test_accumulator_statistics():
    acc = EpochAccumulator()
    acc.add(42.0)
    assert acc.mean == 42.0
    acc.reset()
    for _ in range(100):
        acc.add(7.0)
    assert acc.quantile(0.95) == 7.0


def test_reservoir_p95_close_to_exact():
    for seed in range(5):
        xs = np.random.default_rng(seed).lognormal(5.0, 0.5, 10_000)
        acc = EpochAccumulator(seed=seed)
        for x in xs:
            acc.add(float(x))
        exact = float(np.quantile(xs, 0.95))
        assert abs(acc.quantile(0.95) - exact) / exact <= 0.02
        assert acc.mean == pytest.approx(xs.mean())


def test_tuner_fixed_alpha():
    t = Tuner(TunerConfig(epoch_length=20, min_epoch_samples=20), fixed_alpha=0.25)
    for _ in range(20):
        due = t.observe_query(10.0)
    assert due
    row = t.end_epoch(1.0)
    assert row.phase == "Fixed" and t.alpha == 0.25


def test_search_failure_forces_rebaseline():
    t = Tuner(CFG)
    t.state = steady(0.6)
    t._alpha = 0.6
    t.search_failure()
    assert t.state.phase is TunerPhase.REBASELINE and t.alpha == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TunerConfig(violation_limit=0)
    with pytest.raises(ValueError):
        TunerConfig(statistics=("p95",))


@given(st.lists(st.floats(0.5, 2.0), min_size=1, max_size=200))
def test_alpha_stays_in_unit_interval(ratios):
    s = TunerState()
    for r in ratios:
        s, a = step(s, obs(100.0 * r), CFG)
        assert 0.0 <= s.alpha <= 1.0 and 0.0 <= a <= 1.0
        if s.phase in (TunerPhase.RECORDING, TunerPhase.REBASELINE):
            assert a == 0.0


@given(st.floats(0, 1), st.floats(0.5, 2.0))
def test_steady_direction(alpha, r):
    s, _ = step(steady(alpha), obs(100.0 * r), CFG)
    if r > 1 + CFG.theta:
        assert s.alpha < alpha or alpha == CFG.alpha_floor
    else:
        assert s.alpha > alpha or alpha == 1.0


def test_theta_zero_pins_floor():
    cfg = TunerConfig(theta=0.0, refresh_period=5)
    s = TunerState()
    for _ in range(40):
        s, a = step(s, obs(100.0 * (0.99 + 0.02 * (s.epoch % 2))), cfg)
        assert a == 0.0
        if s.phase is TunerPhase.STEADY:
            assert s.alpha == cfg.alpha_floor and s.disabled
