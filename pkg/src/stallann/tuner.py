"""Feedback control of the utilization ratio.

The utilization ratio ``alpha`` is the fraction of the per-hop budget actually
handed to update slices. A four-phase state machine moves it so that the observed
search latency stays within ``(1 + theta)`` of a no-update baseline:

    Recording -> BinarySearch -> Steady -> (Rebaseline -> Recording)

Search threads feed per-query latencies through ``observe_query``; whoever closes
an epoch calls ``step`` with the epoch's ``LatencyObservation``.
"""

from __future__ import annotations

import enum
import math
import random
import threading
from dataclasses import dataclass, field, replace

import numpy as np

STATISTICS = ("mean", "p95", "p99")


class TunerPhase(enum.Enum):
    RECORDING = "Recording"
    BINARY_SEARCH = "BinarySearch"
    STEADY = "Steady"
    REBASELINE = "Rebaseline"


class InsufficientSamples(ValueError):
    pass


@dataclass
class TunerConfig:
    theta: float = 0.05
    delta_up: float = 0.02
    delta_down: float = 0.02
    epoch_length: int = 200
    min_epoch_samples: int = 20
    violation_limit: int = 3
    statistics: tuple[str, ...] = ("mean",)
    alpha_floor: float = 0.0
    alpha_resolution: float = 1 / 32
    recording_epochs: int = 3
    refresh_period: int = 50
    reservoir_size: int = 8192

    def __post_init__(self) -> None:
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.violation_limit < 1:
            raise ValueError("violation_limit must be >= 1")
        if "mean" not in self.statistics or any(s not in STATISTICS for s in self.statistics):
            raise ValueError(f"statistics must include 'mean' and be drawn from {STATISTICS}")
        if not 0 <= self.alpha_floor <= 1:
            raise ValueError("alpha_floor must be in [0, 1]")


@dataclass(frozen=True)
class LatencyObservation:
    mean: float
    count: int
    p95: float | None = None
    p99: float | None = None

    def get(self, stat: str) -> float | None:
        return getattr(self, stat)


@dataclass
class TunerState:
    phase: TunerPhase = TunerPhase.RECORDING
    alpha: float = 0.0
    baseline: dict[str, float] = field(default_factory=dict)
    consecutive_violations: int = 0
    disabled: bool = False
    refreshing: bool = False
    epoch: int = 0
    phase_epochs: int = 0
    steady_epochs: int = 0
    bs_lo: float = 0.0
    bs_hi: float = 1.0
    recording: list[LatencyObservation] = field(default_factory=list)
    adjustments: int = 0

    @property
    def co_execution_suspended(self) -> bool:
        return (
            self.phase in (TunerPhase.RECORDING, TunerPhase.REBASELINE)
            or self.disabled
            or self.refreshing
        )

    @property
    def effective_alpha(self) -> float:
        if self.co_execution_suspended:
            return 0.0
        if self.phase is TunerPhase.BINARY_SEARCH:
            return 0.5 * (self.bs_lo + self.bs_hi)
        return self.alpha


def _average(obs: list[LatencyObservation]) -> dict[str, float]:
    total = sum(o.count for o in obs)
    out = {"mean": sum(o.mean * o.count for o in obs) / total}
    for stat in ("p95", "p99"):
        vals = [o.get(stat) for o in obs if o.get(stat) is not None]
        if len(vals) == len(obs):
            out[stat] = sum(v * o.count for v, o in zip(vals, obs)) / total
    return out


def ratios(state: TunerState, obs: LatencyObservation, cfg: TunerConfig) -> dict[str, float]:
    """Observed / baseline for every enabled statistic that both sides carry."""
    out = {}
    for stat in cfg.statistics:
        v = obs.get(stat)
        base = state.baseline.get(stat)
        if v is not None and base:
            out[stat] = v / base
    return out


def violates(state: TunerState, obs: LatencyObservation, cfg: TunerConfig) -> bool:
    return any(r > 1 + cfg.theta for r in ratios(state, obs, cfg).values())


def step(state: TunerState, obs: LatencyObservation, cfg: TunerConfig) -> tuple[TunerState, float]:
    """Advance one epoch. Returns the new state and the alpha to apply next epoch."""
    if obs.count < cfg.min_epoch_samples:
        raise InsufficientSamples(f"epoch has {obs.count} samples, need {cfg.min_epoch_samples}")
    s = replace(state, baseline=dict(state.baseline), recording=list(state.recording))
    s.epoch += 1
    s.phase_epochs += 1

    if s.phase is TunerPhase.REBASELINE:
        _enter(s, TunerPhase.RECORDING)
    elif s.phase is TunerPhase.RECORDING:
        s.recording.append(obs)
        if len(s.recording) >= cfg.recording_epochs:
            s.baseline = _average(s.recording)
            s.recording = []
            s.bs_lo, s.bs_hi = 0.0, 1.0
            s.disabled = False
            if cfg.theta == 0:
                # zero tolerance: no alpha above the floor can be certified under epoch noise
                s.alpha = cfg.alpha_floor
                s.disabled = True
                s.steady_epochs = 0
                _enter(s, TunerPhase.STEADY)
            else:
                _enter(s, TunerPhase.BINARY_SEARCH)
    elif s.phase is TunerPhase.BINARY_SEARCH:
        mid = 0.5 * (s.bs_lo + s.bs_hi)
        if violates(s, obs, cfg):
            s.bs_hi = mid
        else:
            s.bs_lo = mid
        if s.bs_hi - s.bs_lo <= cfg.alpha_resolution:
            s.alpha = max(cfg.alpha_floor, s.bs_lo)
            # No probe passed: nothing feasible above the bisection floor.
            s.disabled = s.bs_lo == 0.0
            s.consecutive_violations = 0
            s.steady_epochs = 0
            _enter(s, TunerPhase.STEADY)
    else:
        _steady(s, obs, cfg)
    return s, s.effective_alpha


def _enter(s: TunerState, phase: TunerPhase) -> None:
    s.phase = phase
    s.phase_epochs = 0


def _steady(s: TunerState, obs: LatencyObservation, cfg: TunerConfig) -> None:
    if s.refreshing:
        s.baseline = _average([obs])
        s.refreshing = False
        return
    s.steady_epochs += 1
    if s.disabled:
        if s.steady_epochs >= cfg.refresh_period:
            _enter(s, TunerPhase.REBASELINE)
        return
    if violates(s, obs, cfg):
        new = max(cfg.alpha_floor, s.alpha - cfg.delta_down)
        s.consecutive_violations += 1
        if s.consecutive_violations >= cfg.violation_limit:
            s.consecutive_violations = 0
            s.alpha = new
            s.adjustments += 1
            _enter(s, TunerPhase.REBASELINE)
            return
    else:
        new = min(1.0, s.alpha + cfg.delta_up)
        s.consecutive_violations = 0
    if new != s.alpha:
        s.adjustments += 1
    s.alpha = new
    if cfg.refresh_period and s.steady_epochs % cfg.refresh_period == 0:
        s.refreshing = True


def effective_budget(state: TunerState, tau_est: float) -> float:
    if tau_est < 0:
        raise ValueError("negative budget")
    return state.effective_alpha * tau_est


class EpochAccumulator:
    """Streaming latency statistics for one epoch.

    Mean is exact. P95/P99 come from a bounded reservoir (Algorithm R), which is
    exact while the epoch has no more samples than the reservoir holds.
    """

    def __init__(self, reservoir_size: int = 8192, seed: int = 0) -> None:
        self.reservoir_size = reservoir_size
        self._rng = random.Random(seed)
        self.reset()

    def reset(self) -> None:
        self.count = 0
        self.total = 0.0
        self.reservoir: list[float] = []

    def add(self, latency: float) -> None:
        self.count += 1
        self.total += latency
        if len(self.reservoir) < self.reservoir_size:
            self.reservoir.append(latency)
        else:
            k = self._rng.randrange(self.count)
            if k < self.reservoir_size:
                self.reservoir[k] = latency

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else math.nan

    def quantile(self, q: float) -> float:
        if not self.reservoir:
            return math.nan
        return float(np.quantile(np.asarray(self.reservoir), q))

    def observation(self) -> LatencyObservation:
        return LatencyObservation(
            mean=self.mean, count=self.count, p95=self.quantile(0.95), p99=self.quantile(0.99)
        )


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    time: float
    phase: str
    alpha: float
    ratio: float


class Tuner:
    """Thread-safe wrapper: concurrent ``observe_query``, epoch-boundary ``step``."""

    def __init__(self, config: TunerConfig | None = None, fixed_alpha: float | None = None, seed: int = 0) -> None:
        self.config = config or TunerConfig()
        self.state = TunerState()
        self.fixed_alpha = fixed_alpha
        self._acc = EpochAccumulator(self.config.reservoir_size, seed)
        self._lock = threading.Lock()
        self._alpha = 0.0 if fixed_alpha is None else float(fixed_alpha)
        self.trace: list[TraceRow] = []

    @property
    def alpha(self) -> float:
        return self._alpha

    def effective_budget(self, tau_est: float) -> float:
        return self._alpha * tau_est

    def observe_query(self, latency: float) -> bool:
        """Fold one latency in. True when the epoch is complete and ``step`` is due."""
        with self._lock:
            self._acc.add(latency)
            return self._acc.count >= self.config.epoch_length

    def end_epoch(self, now: float = 0.0) -> TraceRow | None:
        with self._lock:
            if self._acc.count < self.config.min_epoch_samples:
                return None
            obs = self._acc.observation()
            self._acc.reset()
        if self.fixed_alpha is not None:
            row = TraceRow(len(self.trace) + 1, now, "Fixed", self._alpha, math.nan)
            self.trace.append(row)
            return row
        prev = self.state
        r = ratios(prev, obs, self.config).get("mean", math.nan)
        self.state, alpha = step(prev, obs, self.config)
        self._alpha = alpha
        row = TraceRow(self.state.epoch, now, self.state.phase.value, alpha, r)
        self.trace.append(row)
        return row

    def search_failure(self) -> None:
        """A query error during an epoch forces a rebaseline."""
        with self._lock:
            s = replace(self.state)
            _enter(s, TunerPhase.REBASELINE)
            s.consecutive_violations = 0
            self.state = s
            if self.fixed_alpha is None:
                self._alpha = 0.0
