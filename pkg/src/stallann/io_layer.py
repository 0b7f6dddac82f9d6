"""Asynchronous block-device interface with a simulated and a file-backed device.

A search thread submits a batch of record reads, may do other work while they are
in flight, then harvests completions with ``poll_nonblocking`` or
``wait_blocking``. The simulated device computes every completion time at submit
from a latency model, so nothing in it depends on real time:

    due = submit_time + latency + penalty * (requests already outstanding)

Each ``Channel`` (one per search thread) draws latencies from its own seeded
stream, so a thread sees the same latency sequence whatever the other threads do.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import os
import threading
from collections import OrderedDict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor
from concurrent.futures import wait as wait_futures
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .clock import VirtualClock, WallClock


class DeviceError(IOError):
    pass


class QueueOverflow(DeviceError):
    pass


class StaleHandle(DeviceError):
    pass


@dataclass(frozen=True)
class ReadRequest:
    request_id: int
    offset: int
    length: int


@dataclass(frozen=True)
class Completion:
    request_id: int
    payload: bytes
    service_time: float
    done_at: float


# Mode of a lognormal is exp(mu - sigma^2); these put it at 100us.
DEFAULT_SIGMA = 0.5
DEFAULT_MU = math.log(100.0) + DEFAULT_SIGMA**2


@dataclass
class DeviceProfile:
    """Latency model for the simulated device. Times are microseconds."""

    model: str = "lognormal"  # constant | lognormal | empirical
    constant_us: float = 100.0
    mu: float = DEFAULT_MU
    sigma: float = DEFAULT_SIGMA
    samples: tuple[float, ...] = ()
    penalty_us: float = 0.0
    seed: int = 0
    queue_depth: int = 64
    cache_capacity: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("constant", "lognormal", "empirical"):
            raise ValueError(f"unknown latency model {self.model!r}")
        if self.model == "constant" and self.constant_us < 0:
            raise ValueError("constant latency must be >= 0")
        if self.model == "lognormal" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.model == "empirical":
            if not self.samples:
                raise ValueError("empirical model needs samples")
            if min(self.samples) <= 0:
                raise ValueError("empirical latencies must be > 0")
        if self.penalty_us < 0 or self.queue_depth < 1 or self.cache_capacity < 0:
            raise ValueError("penalty, queue_depth and cache_capacity out of range")

    @classmethod
    def constant(cls, us: float, **kw) -> "DeviceProfile":
        return cls(model="constant", constant_us=us, **kw)

    @classmethod
    def lognormal(cls, mu: float = DEFAULT_MU, sigma: float = DEFAULT_SIGMA, **kw) -> "DeviceProfile":
        return cls(model="lognormal", mu=mu, sigma=sigma, **kw)

    @classmethod
    def empirical(cls, source, **kw) -> "DeviceProfile":
        """``source`` is a sequence of latencies or a file with one float per line."""
        if isinstance(source, (str, os.PathLike)):
            with open(source) as f:
                source = [float(line) for line in f if line.strip()]
        return cls(model="empirical", samples=tuple(float(s) for s in source), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        path = d.pop("samples_path", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown device profile keys {sorted(unknown)}")
        if path is not None:
            return cls.empirical(path, **{k: v for k, v in d.items() if k != "model"})
        if "samples" in d:
            d["samples"] = tuple(d["samples"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.model == "constant":
            return np.full(n, float(self.constant_us))
        if self.model == "lognormal":
            return rng.lognormal(self.mu, self.sigma, n)
        return rng.choice(np.asarray(self.samples, dtype=np.float64), n)

    @property
    def mean_latency(self) -> float:
        if self.model == "constant":
            return float(self.constant_us)
        if self.model == "lognormal":
            return math.exp(self.mu + self.sigma**2 / 2)
        return float(np.mean(self.samples))


@dataclass
class Channel:
    """One submitter's view of the device: its clock, latency stream and queue."""

    index: int
    clock: object
    rng: np.random.Generator
    outstanding: int = 0


@dataclass
class BatchHandle:
    batch_id: int
    channel: Channel
    submitted_at: float
    # (due, position, completion, offset), sorted
    pending: list = field(default_factory=list)
    hits: int = 0
    closed: bool = False

    @property
    def size(self) -> int:
        return len(self.pending)

    @property
    def last_due(self) -> float:
        return self.pending[-1][0] if self.pending else self.submitted_at


class SimulatedDevice:
    """Deterministic device over a store (``MemoryStore`` or ``FileStore``).

    Payloads are read from the store at submit. Writes go straight to the store.
    An optional LRU of record payloads answers repeat reads at service time 0.
    """

    virtual = True

    def __init__(self, store, profile: DeviceProfile | None = None, clock=None) -> None:
        self.store = store
        self.profile = profile or DeviceProfile()
        self.clock = clock if clock is not None else VirtualClock()
        self._lock = threading.Lock()
        self._inflight: list[float] = []
        self._channel_ids = itertools.count()
        self._batch_ids = itertools.count()
        self._cache: OrderedDict[int, bytes] = OrderedDict()
        self.default_channel = self.channel(self.clock)
        self.reads = 0
        self.cache_hits = 0

    def channel(self, clock=None) -> Channel:
        k = next(self._channel_ids)
        rng = np.random.default_rng([self.profile.seed, k])
        return Channel(k, clock if clock is not None else self.clock, rng)

    def submit(self, batch: Sequence[ReadRequest], channel: Channel | None = None) -> BatchHandle:
        ch = channel or self.default_channel
        qd = self.profile.queue_depth
        if not 1 <= len(batch) <= qd or ch.outstanding + len(batch) > qd:
            raise QueueOverflow(f"batch of {len(batch)} with {ch.outstanding} outstanding exceeds depth {qd}")
        now = ch.clock.now()
        handle = BatchHandle(next(self._batch_ids), ch, now)
        misses = []
        with self._lock:
            for pos, req in enumerate(batch):
                cached = self._cache_get(req.offset, req.length)
                if cached is not None:
                    handle.pending.append((now, pos, Completion(req.request_id, cached, 0.0, now), req.offset))
                    handle.hits += 1
                else:
                    misses.append((pos, req))
            lat = self.profile.sample(ch.rng, len(misses)) if misses else ()
            heap = self._inflight
            while heap and heap[0] <= now:
                heapq.heappop(heap)
            busy = len(heap)
            for (pos, req), l in zip(misses, lat):
                service = float(l) + self.profile.penalty_us * busy
                due = now + service
                heapq.heappush(heap, due)
                busy += 1
                payload = self.store.read(req.offset, req.length)
                handle.pending.append((due, pos, Completion(req.request_id, payload, service, due), req.offset))
            self.reads += len(batch)
            self.cache_hits += handle.hits
        handle.pending.sort(key=lambda e: (e[0], e[1]))
        ch.outstanding += len(batch)
        return handle

    def _cache_get(self, offset: int, length: int) -> bytes | None:
        if not self.profile.cache_capacity:
            return None
        data = self._cache.get(offset)
        if data is not None and len(data) == length:
            self._cache.move_to_end(offset)
            return data
        return None

    def _cache_put(self, offset: int, data: bytes) -> None:
        cap = self.profile.cache_capacity
        if not cap:
            return
        with self._lock:
            self._cache[offset] = data
            self._cache.move_to_end(offset)
            while len(self._cache) > cap:
                self._cache.popitem(last=False)

    def _harvest(self, handle: BatchHandle, upto: float) -> list[Completion]:
        if handle.closed:
            raise StaleHandle(f"batch {handle.batch_id} already fully harvested")
        k = 0
        while k < len(handle.pending) and handle.pending[k][0] <= upto:
            k += 1
        done = handle.pending[:k]
        del handle.pending[:k]
        handle.channel.outstanding -= k
        if not handle.pending:
            handle.closed = True
        if self.profile.cache_capacity:
            for _, _, c, off in done:
                self._cache_put(off, c.payload)
        return [e[2] for e in done]

    def poll_nonblocking(self, handle: BatchHandle) -> list[Completion]:
        """Completions already due on the handle's clock. Never advances time."""
        return self._harvest(handle, handle.channel.clock.now())

    def wait_blocking(self, handle: BatchHandle) -> list[Completion]:
        """Advance the handle's clock to its next completion and harvest what is due."""
        if handle.closed:
            raise StaleHandle(f"batch {handle.batch_id} already fully harvested")
        handle.channel.clock.advance_to(handle.pending[0][0])
        return self.poll_nonblocking(handle)

    def next_due(self, handle: BatchHandle) -> float | None:
        return handle.pending[0][0] if handle.pending else None

    def advance_virtual_time(self, duration: float, clock=None) -> None:
        if duration < 0:
            raise ValueError("negative duration")
        clock = clock if clock is not None else self.clock
        clock.advance_to(clock.now() + duration)

    def read(self, offset: int, length: int) -> bytes:
        return self.store.read(offset, length)

    def invalidate(self, offset: int) -> None:
        """Drop a cached record after its bytes changed underneath the device."""
        with self._lock:
            self._cache.pop(offset, None)

    def write(self, offset: int, data: bytes) -> None:
        self.invalidate(offset)
        self.store.write(offset, data)


class FileDevice:
    """Real reads on a file descriptor, completed by a small thread pool."""

    virtual = False

    def __init__(self, path, workers: int = 8, queue_depth: int = 64, clock=None) -> None:
        self.path = os.fspath(path)
        self.fd = os.open(self.path, os.O_RDWR)
        self.clock = clock if clock is not None else WallClock()
        self.queue_depth = queue_depth
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fdev")
        self._batch_ids = itertools.count()
        self._channel_ids = itertools.count()
        self.default_channel = self.channel()

    def channel(self, clock=None) -> Channel:
        return Channel(next(self._channel_ids), clock if clock is not None else self.clock, None)

    def _read_one(self, req: ReadRequest) -> Completion:
        t0 = self.clock.now()
        data = os.pread(self.fd, req.length, req.offset)
        t1 = self.clock.now()
        if len(data) != req.length:
            raise DeviceError(f"short read at {req.offset}")
        return Completion(req.request_id, data, t1 - t0, t1)

    def submit(self, batch: Sequence[ReadRequest], channel: Channel | None = None) -> BatchHandle:
        ch = channel or self.default_channel
        if not 1 <= len(batch) <= self.queue_depth or ch.outstanding + len(batch) > self.queue_depth:
            raise QueueOverflow(f"batch of {len(batch)} exceeds depth {self.queue_depth}")
        handle = BatchHandle(next(self._batch_ids), ch, ch.clock.now())
        handle.pending = [self._pool.submit(self._read_one, r) for r in batch]
        ch.outstanding += len(batch)
        return handle

    def _take(self, handle: BatchHandle, done) -> list[Completion]:
        out = [f.result() for f in handle.pending if f in done]
        handle.pending = [f for f in handle.pending if f not in done]
        handle.channel.outstanding -= len(out)
        if not handle.pending:
            handle.closed = True
        out.sort(key=lambda c: c.done_at)
        return out

    def poll_nonblocking(self, handle: BatchHandle) -> list[Completion]:
        if handle.closed:
            raise StaleHandle(f"batch {handle.batch_id} already fully harvested")
        return self._take(handle, {f for f in handle.pending if f.done()})

    def wait_blocking(self, handle: BatchHandle) -> list[Completion]:
        if handle.closed:
            raise StaleHandle(f"batch {handle.batch_id} already fully harvested")
        done, _ = wait_futures(handle.pending, return_when=FIRST_COMPLETED)
        return self._take(handle, done)

    def next_due(self, handle: BatchHandle) -> float | None:
        return None

    def advance_virtual_time(self, duration: float, clock=None) -> None:
        raise DeviceError("file device runs in real time")

    def read(self, offset: int, length: int) -> bytes:
        return os.pread(self.fd, length, offset)

    def write(self, offset: int, data: bytes) -> None:
        os.pwrite(self.fd, data, offset)

    def close(self) -> None:
        self._pool.shutdown(wait=True)
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1
