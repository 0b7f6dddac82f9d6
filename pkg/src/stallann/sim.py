"""Discrete-event scheduler for generator processes on per-process virtual clocks.

A process is a generator that yields the virtual time at which it wants to run
next. The scheduler always resumes the process with the smallest requested time
(ties in spawn/request order), first moving that process's clock up to it. Work
done between two yields is charged to the process's own clock, so concurrently
"running" threads each keep their own time while shared state is touched in
time order.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

from .clock import VirtualClock


@dataclass
class Process:
    name: str
    gen: object
    clock: VirtualClock
    finished: bool = False
    value: object = None


@dataclass
class Simulation:
    now: float = 0.0
    _heap: list = field(default_factory=list)
    _seq: itertools.count = field(default_factory=itertools.count)
    processes: list[Process] = field(default_factory=list)

    def spawn(self, name: str, gen, clock: VirtualClock) -> Process:
        p = Process(name, gen, clock)
        self.processes.append(p)
        heapq.heappush(self._heap, (clock.now(), next(self._seq), p))
        return p

    def run(self, until: float = math.inf) -> None:
        heap = self._heap
        while heap:
            t, _, p = heap[0]
            if t > until:
                break
            heapq.heappop(heap)
            self.now = t
            p.clock.advance_to(t)
            try:
                want = next(p.gen)
            except StopIteration as stop:
                p.finished = True
                p.value = stop.value
                continue
            heapq.heappush(heap, (max(float(want), p.clock.now()), next(self._seq), p))

    @property
    def idle(self) -> bool:
        return not self._heap
