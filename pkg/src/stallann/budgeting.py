"""Per-hop update-time budgets that bound expected overrun.

Given recent idle-window lengths ``t_1..t_N`` and a tolerance ``theta``, the budget
``b`` is the largest value with

    (1/N) * sum(max(0, b - t_i))  <=  theta * (1/N) * sum(t_i)

The left side is non-decreasing in ``b``, so a bisection finds it. In k-sparse mode
only every K-th window (1-based positions K, 2K, ...) is counted on the left while
the right side still averages over all N windows.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class IdleSample:
    duration: float
    batch_size: int

    def __post_init__(self) -> None:
        if self.duration < 0:
            raise ValueError("negative idle duration")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class BudgetConfig:
    theta: float = 0.05
    window: int = 256
    min_samples: int = 32
    epsilon: float = 0.5
    buckets: int = 8
    mode: str = "per_batch"  # or "k_sparse"
    k_sparse: int = 8
    resolve_period: int = 64

    def __post_init__(self) -> None:
        if self.mode not in ("per_batch", "k_sparse"):
            raise ValueError(f"unknown budgeting mode {self.mode!r}")
        if self.buckets < 1 or self.k_sparse < 1 or self.window < 1:
            raise ValueError("buckets, k_sparse and window must be >= 1")
        if self.min_samples > self.window:
            raise ValueError("min_samples cannot exceed window")


def _scheduled(arr: np.ndarray, k_sparse: int) -> np.ndarray:
    if k_sparse == 1:
        return arr
    return arr[k_sparse - 1 :: k_sparse]


def overrun(budget: float, samples: Sequence[float], k_sparse: int = 1) -> float:
    """Empirical mean overrun of ``budget``, counted on scheduled windows only."""
    arr = np.asarray(samples, dtype=np.float64)
    sched = _scheduled(arr, k_sparse)
    return float(np.maximum(0.0, budget - sched).sum()) / len(arr)


def _within(budget: float, sched: np.ndarray, allowed: float) -> bool:
    # Sums rather than means: both sides share the 1/N factor, and this is the one
    # comparison the solver and the feasibility check both use.
    return float(np.maximum(0.0, budget - sched).sum()) <= allowed


def is_feasible(budget: float, samples: Sequence[float], theta: float, k_sparse: int = 1) -> bool:
    arr = np.asarray(samples, dtype=np.float64)
    return _within(budget, _scheduled(arr, k_sparse), theta * float(arr.sum()))


def solve_budget_ksparse(
    samples: Sequence[float], theta: float, k_sparse: int, epsilon: float = 0.5
) -> float:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no samples")
    if theta < 0 or (arr < 0).any():
        raise ValueError("theta and samples must be non-negative")
    if k_sparse < 1:
        raise ValueError("k_sparse must be >= 1")
    sched = _scheduled(arr, k_sparse)
    allowed = theta * float(arr.sum())
    if sched.size == 0:
        # Nothing is ever scheduled, so the whole search range is feasible.
        return max(float(arr.max()), float(arr.mean()) * (1 + theta))
    # Past max(samples) the left side is linear; this bounds every feasible value.
    hi = max(float(arr.max()), float(sched.mean()) + allowed / sched.size)
    lo = 0.0

    def ok(b: float) -> bool:
        return _within(b, sched, allowed)

    if ok(hi):
        return hi
    while hi - lo > epsilon:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def solve_budget(samples: Sequence[float], theta: float, epsilon: float = 0.5) -> float:
    return solve_budget_ksparse(samples, theta, 1, epsilon)


class SampleWindow:
    """Ring buffer of the most recent idle durations for one bucket."""

    def __init__(self, capacity: int) -> None:
        self.samples: deque[float] = deque(maxlen=capacity)
        self.since_solve = 0
        self.budget: float | None = None
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.samples)


class BudgetTable:
    """Budget per batch size (or a single k-sparse bucket), shared by search threads."""

    def __init__(self, config: BudgetConfig | None = None) -> None:
        self.config = config or BudgetConfig()
        nb = 1 if self.config.mode == "k_sparse" else self.config.buckets
        self.windows = [SampleWindow(self.config.window) for _ in range(nb)]

    def bucket(self, batch_size: int) -> int:
        if self.config.mode == "k_sparse":
            return 1
        return min(max(int(batch_size), 1), self.config.buckets)

    def record_sample(self, sample: IdleSample) -> None:
        cfg = self.config
        w = self.windows[self.bucket(sample.batch_size) - 1]
        with w.lock:
            w.samples.append(float(sample.duration))
            w.since_solve += 1
            n = len(w.samples)
            if n < cfg.min_samples:
                return
            if w.budget is None or w.since_solve >= cfg.resolve_period:
                self._solve(w)

    def _solve(self, w: SampleWindow) -> None:
        cfg = self.config
        k = cfg.k_sparse if cfg.mode == "k_sparse" else 1
        w.budget = solve_budget_ksparse(list(w.samples), cfg.theta, k, cfg.epsilon)
        w.since_solve = 0

    def resolve(self) -> None:
        """Force a re-solve of every bucket that has enough samples."""
        for w in self.windows:
            with w.lock:
                if len(w.samples) >= self.config.min_samples:
                    self._solve(w)

    def get_budget(self, batch_size: int) -> float | None:
        # Reading a float attribute is atomic; no lock on the read path.
        return self.windows[self.bucket(batch_size) - 1].budget

    def schedules(self, hop_index: int) -> bool:
        """Whether the ``hop_index``-th (0-based) hop of a thread may run update work."""
        if self.config.mode != "k_sparse":
            return True
        return (hop_index + 1) % self.config.k_sparse == 0

    def window_samples(self, batch_size: int) -> list[float]:
        w = self.windows[self.bucket(batch_size) - 1]
        with w.lock:
            return list(w.samples)
