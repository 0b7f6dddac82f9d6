"""Monotonic clocks in microseconds.

Code that does CPU work reports it through ``charge``. On the wall clock that is a
no-op because the work itself takes real time; on a virtual clock it is the only
way time moves forward, which keeps simulated runs deterministic.
"""

from __future__ import annotations

import time


class WallClock:
    """Process monotonic clock, microsecond units."""

    virtual = False

    def now(self) -> float:
        return time.perf_counter_ns() / 1000.0

    def charge(self, us: float) -> None:
        pass

    def advance_to(self, t: float) -> None:
        raise RuntimeError("cannot advance a wall clock")


class VirtualClock:
    virtual = True

    def __init__(self, start: float = 0.0) -> None:
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def charge(self, us: float) -> None:
        if us < 0:
            raise ValueError("negative charge")
        self._t += us

    def advance_to(self, t: float) -> None:
        # Never moves backwards; a thread that ran ahead keeps its own time.
        if t > self._t:
            self._t = float(t)

    def __repr__(self) -> str:
        return f"VirtualClock(t={self._t:.3f})"
