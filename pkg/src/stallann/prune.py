"""Sparse-neighborhood-graph neighbor selection.

Two entry points compute the same thing:

* ``prune_monolithic`` runs the classic nested loop to completion.
* ``prune_slice`` runs the same loop under a time budget. When the budget runs
  out it saves ``(result, done, i, j + 1)`` and returns ``Yielded``; the next call
  picks up at the saved inner cursor. Any sequence of positive budgets ends in the
  same ``Completed`` result as the monolithic call.

The candidate pool is frozen when the task state is created. Distances between
pool members come from one cached matrix per state, shared by both entry points,
so the two paths compare bit-identical floats.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist


class CorruptCheckpoint(ValueError):
    """A checkpoint does not fit the pool it is being restored into."""


@dataclass(frozen=True)
class Candidate:
    id: int
    dist_to_target: float


# Pools up to this size get their full distance matrix in one call.
_FULL_MATRIX_MAX = 512


def _row_distances(vectors: np.ndarray, k: int) -> np.ndarray:
    return cdist(vectors[k : k + 1], vectors)[0]


def _target_distances(vectors: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = vectors - target
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass
class PruneCheckpoint:
    """Resumable state of one prune: selected pool indexes, done flags, cursors."""

    result: list[int]
    done: bytes
    i: int
    j: int

    @property
    def flags(self) -> list[bool]:
        return [bool(b) for b in self.done]

    def validate(self, pool_len: int, R: int) -> None:
        if len(self.done) != pool_len:
            raise CorruptCheckpoint(f"done has {len(self.done)} flags, pool has {pool_len}")
        if not self.result or len(self.result) > R:
            raise CorruptCheckpoint(f"result size {len(self.result)} outside [1, {R}]")
        prev = -1
        for k in self.result:
            if not (prev < k < pool_len) or not self.done[k]:
                raise CorruptCheckpoint(f"bad result index {k}")
            prev = k
        if not (0 <= self.i < pool_len) or self.result[-1] != self.i:
            raise CorruptCheckpoint(f"outer cursor {self.i} does not match last selection")
        if not (self.i < self.j <= pool_len):
            raise CorruptCheckpoint(f"inner cursor {self.j} outside ({self.i}, {pool_len}]")

    def to_bytes(self) -> bytes:
        n = len(self.done)
        bits = bytearray((n + 7) // 8)
        for k, flag in enumerate(self.done):
            if flag:
                bits[k >> 3] |= 1 << (k & 7)
        return b"".join(
            [
                struct.pack("<I", len(self.result)),
                struct.pack(f"<{len(self.result)}I", *self.result),
                struct.pack("<I", n),
                bytes(bits),
                struct.pack("<II", self.i, self.j),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PruneCheckpoint":
        try:
            (m,) = struct.unpack_from("<I", data, 0)
            off = 4
            result = list(struct.unpack_from(f"<{m}I", data, off))
            off += 4 * m
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            nbytes = (n + 7) // 8
            bits = data[off : off + nbytes]
            if len(bits) != nbytes:
                raise CorruptCheckpoint("truncated done bitset")
            off += nbytes
            i, j = struct.unpack_from("<II", data, off)
            off += 8
        except struct.error as exc:
            raise CorruptCheckpoint(str(exc)) from exc
        if off != len(data):
            raise CorruptCheckpoint("trailing bytes after checkpoint")
        done = bytes((bits[k >> 3] >> (k & 7)) & 1 for k in range(n))
        return cls(result=result, done=done, i=i, j=j)


@dataclass(frozen=True)
class Completed:
    result: list[int]


@dataclass(frozen=True)
class Yielded:
    checkpoint: PruneCheckpoint


SliceOutcome = Union[Completed, Yielded]


@dataclass
class PruneTaskState:
    """One neighbor-repair prune: the target point and its immutable pool.

    The pool is held as parallel arrays ``pool_ids`` / ``pool_dists`` (ascending by
    distance, ties by id) plus the candidates' vectors in the same order.
    """

    target: np.ndarray
    pool_ids: np.ndarray
    pool_dists: np.ndarray
    pool_vectors: np.ndarray
    alpha: float
    R: int
    checkpoint: PruneCheckpoint | None = None
    _rows: dict[int, list[float]] = field(default_factory=dict, repr=False)
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _dist_list: list[float] | None = field(default=None, repr=False)

    @classmethod
    def create(
        cls,
        target: np.ndarray,
        ids: Sequence[int],
        vectors: np.ndarray,
        alpha: float,
        R: int,
    ) -> "PruneTaskState":
        """Build a state from candidate ids and their vectors (row k belongs to ids[k]).

        Duplicate ids are dropped; the pool is sorted by distance to ``target`` with
        ties going to the lower id.
        """
        if R < 1:
            raise ValueError("R must be >= 1")
        if alpha < 1:
            raise ValueError("alpha_prune must be >= 1")
        target = np.asarray(target, dtype=np.float64)
        ids_arr = np.asarray(ids, dtype=np.int64).reshape(-1)
        vecs = np.asarray(vectors, dtype=np.float64).reshape(len(ids_arr), target.shape[0])
        dists = _target_distances(vecs, target)
        order = np.lexsort((ids_arr, dists))
        if len(order) > 1:
            # Equal ids carry equal vectors, so they sort next to each other.
            sid = ids_arr[order]
            order = order[np.concatenate(([True], sid[1:] != sid[:-1]))]
        return cls(
            target=target,
            pool_ids=ids_arr[order],
            pool_dists=dists[order],
            pool_vectors=np.ascontiguousarray(vecs[order]),
            alpha=float(alpha),
            R=int(R),
        )

    def __len__(self) -> int:
        return len(self.pool_ids)

    @property
    def pool(self) -> tuple[Candidate, ...]:
        return tuple(Candidate(int(i), float(d)) for i, d in zip(self.pool_ids, self.pool_dists))

    @property
    def dist_list(self) -> list[float]:
        if self._dist_list is None:
            self._dist_list = self.pool_dists.tolist()
        return self._dist_list

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = cdist(self.pool_vectors, self.pool_vectors)
        return self._matrix

    def row(self, k: int) -> list[float]:
        """Distances from pool[k] to every pool member. Cached; derivable from the pool."""
        r = self._rows.get(k)
        if r is None:
            if len(self) <= _FULL_MATRIX_MAX:
                if self._matrix is None:
                    self._matrix = cdist(self.pool_vectors, self.pool_vectors)
                    self._rows = dict(enumerate(self._matrix.tolist()))
                    return self._rows[k]
                r = self._matrix[k].tolist()
            else:
                r = _row_distances(self.pool_vectors, k).tolist()
            self._rows[k] = r
        return r

    def restore(self, checkpoint: PruneCheckpoint) -> None:
        checkpoint.validate(len(self), self.R)
        self.checkpoint = checkpoint

    @property
    def ids(self) -> list[int]:
        return self.pool_ids.tolist()


def restore(checkpoint: PruneCheckpoint, state: PruneTaskState) -> None:
    state.restore(checkpoint)


def prune_monolithic(state: PruneTaskState) -> list[int]:
    """Uninterrupted selection over ``state``'s pool; ignores any checkpoint."""
    n = len(state)
    alpha, R = state.alpha, state.R
    dist = state.dist_list
    done = [False] * n
    result: list[int] = []
    for i in range(n):
        if done[i]:
            continue
        result.append(i)
        done[i] = True
        if len(result) >= R:
            break
        row = state.row(i)
        for j in range(i + 1, n):
            if not done[j] and alpha * row[j] <= dist[j]:
                done[j] = True
    return state.pool_ids[result].tolist()


def prune(target, ids, vectors, alpha: float, R: int) -> list[int]:
    """Convenience wrapper: create a state and prune it in one go."""
    return prune_monolithic(PruneTaskState.create(target, ids, vectors, alpha, R))


def prune_slice(state: PruneTaskState, budget: float, clock, iteration_cost: float = 1.0) -> SliceOutcome:
    """Run the prune until it finishes or ``budget`` microseconds have elapsed.

    The budget is tested after every inner-loop iteration, so a slice overshoots by
    at most one iteration. ``clock.charge(iteration_cost)`` is called per inner
    iteration; on a virtual clock that is what makes time pass.
    """
    if not budget > 0:
        raise ValueError("budget must be positive")
    n = len(state)
    alpha, R = state.alpha, state.R
    dist = state.dist_list
    cp = state.checkpoint
    if cp is None:
        result: list[int] = []
        done = bytearray(n)
        i = 0
        resume_j = -1
    else:
        cp.validate(n, R)
        result = list(cp.result)
        done = bytearray(cp.done)
        i = cp.i
        resume_j = cp.j
    now = clock.now
    charge = clock.charge
    virtual = getattr(clock, "virtual", False)
    t = now()
    deadline = t + budget if math.isfinite(budget) else math.inf

    while i < n:
        if resume_j < 0:
            if done[i]:
                i += 1
                continue
            result.append(i)
            done[i] = 1
            if len(result) >= R:
                break
            j = i + 1
        else:
            j = resume_j
            resume_j = -1
        row = state.row(i)
        while j < n:
            if not done[j] and alpha * row[j] <= dist[j]:
                done[j] = 1
            if virtual:
                # Same float accumulation as repeated charge(); the clock catches up below.
                t += iteration_cost
            else:
                charge(iteration_cost)
                t = now()
            if t >= deadline:
                state.checkpoint = PruneCheckpoint(result, bytes(done), i, j + 1)
                if virtual:
                    clock.advance_to(t)
                return Yielded(state.checkpoint)
            j += 1
        i += 1

    if virtual:
        clock.advance_to(t)
    state.checkpoint = None
    return Completed(state.pool_ids[result].tolist())
