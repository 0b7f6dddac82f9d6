"""Graph index: fixed-size node records, compressed vectors, and construction.

File layout (little-endian)::

    header   magic "LIOSIDX1", version u32, dim u32, R u32, padded_record_size u32,
             count u64, entry_point u64, tombstone_offset u64, tombstone_length u64,
             zero-padded to ``record_align`` bytes
    records  record ``id`` at ``header_size + id * padded_record_size``
    tombs    ``tombstone_length`` u64 ids at ``tombstone_offset`` (after the records)

A record is ``f32[dim]`` vector, ``u32`` neighbor count, ``u32[R]`` neighbor ids
(unused slots 0xFFFFFFFF), ``u32`` CRC32 of everything before it, zero padding.
The compressed codes live in a sidecar file next to the index (``<path>.sqv``).
"""

from __future__ import annotations

import enum
import os
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .prune import PruneTaskState, prune_monolithic
from .quantizer import CompressedVectors, ScalarQuantizer

MAGIC = b"LIOSIDX1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIQQQQ")
_EMPTY = 0xFFFFFFFF
MEDOID_SAMPLE = 1000


class StoreError(LookupError):
    pass


class UnknownId(KeyError):
    pass


class CorruptRecord(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class Metric(enum.Enum):
    L2 = "l2"


@dataclass
class IndexConfig:
    dim: int
    R: int = 16
    L_build: int = 32
    alpha_prune: float = 1.2
    record_align: int = 4096
    quant_bits: int = 8
    metric: Metric = Metric.L2
    entry_point: int | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.alpha_prune < 1:
            raise ValueError("alpha_prune must be >= 1")
        a = self.record_align
        if a < 1 or a & (a - 1):
            raise ValueError("record_align must be a power of two")
        if self.metric is not Metric.L2:
            raise ValueError("only L2 is supported")

    @property
    def raw_record_size(self) -> int:
        return 4 * self.dim + 4 + 4 * self.R + 4

    @property
    def padded_record_size(self) -> int:
        a = self.record_align
        return -(-self.raw_record_size // a) * a

    @property
    def header_size(self) -> int:
        return -(-_HEADER.size // self.record_align) * self.record_align


@dataclass
class NodeRecord:
    vector: np.ndarray
    neighbors: list[int] = field(default_factory=list)

    @property
    def neighbor_count(self) -> int:
        return len(self.neighbors)

    def validate(self, vid: int | None, dim: int, R: int) -> None:
        if self.vector.shape != (dim,):
            raise DimensionMismatch(f"vector has shape {self.vector.shape}, index dim is {dim}")
        if not np.isfinite(self.vector).all():
            raise ValueError("vector has non-finite components")
        if len(self.neighbors) > R:
            raise ValueError(f"{len(self.neighbors)} neighbors exceeds R={R}")
        if len(set(self.neighbors)) != len(self.neighbors):
            raise ValueError("duplicate neighbor ids")
        if vid is not None and vid in self.neighbors:
            raise ValueError("self loop")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NodeRecord)
            and list(self.neighbors) == list(other.neighbors)
            and np.array_equal(self.vector, other.vector)
        )


def encode_record(rec: NodeRecord, cfg: IndexConfig) -> bytes:
    nb = list(rec.neighbors) + [_EMPTY] * (cfg.R - len(rec.neighbors))
    body = (
        np.asarray(rec.vector, dtype="<f4").tobytes()
        + struct.pack("<I", len(rec.neighbors))
        + struct.pack(f"<{cfg.R}I", *nb)
    )
    body += struct.pack("<I", zlib.crc32(body))
    return body + bytes(cfg.padded_record_size - len(body))


def decode_record(buf: bytes, cfg: IndexConfig) -> NodeRecord:
    n = cfg.raw_record_size
    if len(buf) < n:
        raise CorruptRecord("short record")
    (crc,) = struct.unpack_from("<I", buf, n - 4)
    if zlib.crc32(buf[: n - 4]) != crc:
        raise CorruptRecord("checksum mismatch")
    d = cfg.dim
    vec = np.frombuffer(buf, dtype="<f4", count=d).astype(np.float32)
    (cnt,) = struct.unpack_from("<I", buf, 4 * d)
    if cnt > cfg.R:
        raise CorruptRecord("neighbor count exceeds R")
    nbrs = list(struct.unpack_from(f"<{cnt}I", buf, 4 * d + 4))
    return NodeRecord(vec, nbrs)


def exact_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(d @ d))


def _distances(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = vectors.astype(np.float64) - query
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class MemoryStore:
    """Growable in-memory image of an index file."""

    def __init__(self, data: bytes | bytearray = b"") -> None:
        self._buf = bytearray(data)
        self._lock = threading.Lock()

    def read(self, offset: int, length: int) -> bytes:
        if offset + length > len(self._buf):
            raise StoreError(f"read past end ({offset}+{length} > {len(self._buf)})")
        return bytes(self._buf[offset : offset + length])

    def write(self, offset: int, data: bytes) -> None:
        end = offset + len(data)
        with self._lock:
            if end > len(self._buf):
                self._buf.extend(bytes(max(end - len(self._buf), len(self._buf) // 2)))
            self._buf[offset:end] = data

    def size(self) -> int:
        return len(self._buf)

    def truncate(self, size: int) -> None:
        with self._lock:
            del self._buf[size:]

    def close(self) -> None:
        pass


class FileStore:
    def __init__(self, path, create: bool = False) -> None:
        flags = os.O_RDWR | (os.O_CREAT if create else 0)
        self.path = os.fspath(path)
        self.fd = os.open(self.path, flags, 0o644)

    def read(self, offset: int, length: int) -> bytes:
        data = os.pread(self.fd, length, offset)
        if len(data) != length:
            raise StoreError(f"short read at {offset}")
        return data

    def write(self, offset: int, data: bytes) -> None:
        n = os.pwrite(self.fd, data, offset)
        if n != len(data):
            raise OSError(f"short write at {offset}")

    def size(self) -> int:
        return os.fstat(self.fd).st_size

    def truncate(self, size: int) -> None:
        os.ftruncate(self.fd, size)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


class GreedySearch:
    """In-memory best-first search with exact distances, advanced one hop at a time.

    Used by construction and by the insert path. Tombstoned nodes are traversed but
    never reported as candidates.
    """

    def __init__(self, index: "GraphIndex", query: np.ndarray, L: int, exclude: int | None = None) -> None:
        self.index = index
        self.query = np.asarray(query, dtype=np.float64)
        self.L = L
        self.exclude = exclude
        ep = index.entry_point
        self.seen = {ep}
        d0 = float(_distances(index.vectors[[ep]], self.query)[0])
        self.pool: list[tuple[float, int]] = [(d0, ep)]
        self.expanded: set[int] = set()
        self.visited: list[tuple[float, int]] = []
        self.done = False

    def step(self) -> int:
        """Expand the closest unexpanded pool entry. Returns distances computed."""
        if self.done:
            return 0
        for d, vid in self.pool:
            if vid not in self.expanded:
                break
        else:
            self.done = True
            return 0
        self.expanded.add(vid)
        self.visited.append((d, vid))
        fresh = [u for u in self.index.adjacency[vid] if u not in self.seen]
        if not fresh:
            return 0
        self.seen.update(fresh)
        dists = _distances(self.index.vectors[fresh], self.query).tolist()
        merged = self.pool + list(zip(dists, fresh))
        merged.sort()
        self.pool = merged[: self.L]
        return len(fresh)

    def run(self) -> "GreedySearch":
        while not self.done:
            self.step()
        return self

    def candidates(self) -> list[int]:
        tomb = self.index.tombstones
        return [v for _, v in sorted(self.visited) if v != self.exclude and v not in tomb]


class GraphIndex:
    """Logical graph plus its record store and compressed vectors."""

    def __init__(self, cfg: IndexConfig, quantizer: ScalarQuantizer, store=None, capacity: int = 16) -> None:
        self.cfg = cfg
        self.dim = cfg.dim
        self.R = cfg.R
        self.store = store if store is not None else MemoryStore()
        self.vectors = np.zeros((max(capacity, 1), cfg.dim), dtype=np.float32)
        self.adjacency: list[list[int]] = []
        self.tombstones: set[int] = set()
        self.compressed = CompressedVectors(quantizer, cfg.dim, capacity)
        self.entry_point: int = cfg.entry_point if cfg.entry_point is not None else 0
        self._alloc_lock = threading.Lock()
        self._tomb_lock = threading.Lock()
        self._record_locks = [threading.Lock() for _ in range(256)]
        # called with the byte offset of every rewritten record (device caches)
        self.write_listeners: list = []

    # -- identity ----------------------------------------------------------
    @property
    def count(self) -> int:
        return len(self.adjacency)

    @property
    def live_count(self) -> int:
        return self.count - len(self.tombstones)

    def is_live(self, vid: int) -> bool:
        return 0 <= vid < self.count and vid not in self.tombstones

    def live_ids(self) -> list[int]:
        return [v for v in range(self.count) if v not in self.tombstones]

    def record_lock(self, vid: int) -> threading.Lock:
        return self._record_locks[vid % len(self._record_locks)]

    def offset(self, vid: int) -> int:
        return self.cfg.header_size + vid * self.cfg.padded_record_size

    def _check_id(self, vid: int) -> None:
        if not 0 <= vid < self.count:
            raise UnknownId(vid)

    def allocate(self, vector) -> int:
        """Reserve a fresh id for ``vector`` with an empty neighbor list."""
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"vector has shape {v.shape}, index dim is {self.dim}")
        if not np.isfinite(v).all():
            raise ValueError("vector has non-finite components")
        with self._alloc_lock:
            vid = self.count
            if vid >= len(self.vectors):
                grown = np.zeros((2 * len(self.vectors), self.dim), dtype=np.float32)
                grown[:vid] = self.vectors[:vid]
                self.vectors = grown
            self.vectors[vid] = v
            self.adjacency.append([])
            self.compressed.set(vid, v)
        self.store.write(self.offset(vid), encode_record(NodeRecord(v, []), self.cfg))
        return vid

    # -- records -----------------------------------------------------------
    def read_node(self, vid: int) -> NodeRecord:
        self._check_id(vid)
        return decode_record(self.store.read(self.offset(vid), self.cfg.padded_record_size), self.cfg)

    def write_node(self, vid: int, rec: NodeRecord) -> None:
        self._check_id(vid)
        rec.validate(vid, self.dim, self.R)
        data = encode_record(rec, self.cfg)
        with self.record_lock(vid):
            self.store.write(self.offset(vid), data)
            self.adjacency[vid] = list(rec.neighbors)
        for fn in self.write_listeners:
            fn(self.offset(vid))

    def set_neighbors(self, vid: int, neighbors: Sequence[int]) -> None:
        self.write_node(vid, NodeRecord(self.vectors[vid].copy(), list(neighbors)))

    # -- distances ---------------------------------------------------------
    def approx_distance(self, query, vid: int) -> float:
        self._check_id(vid)
        return self.compressed.approx_distance(query, vid)

    def approx_distances(self, query: np.ndarray, ids) -> np.ndarray:
        return self.compressed.approx_distances(query, ids)

    def exact_distances(self, query: np.ndarray, ids) -> np.ndarray:
        return _distances(self.vectors[list(ids)], np.asarray(query, dtype=np.float64))

    def prune_state(self, target_id: int, pool_ids: Iterable[int]) -> PruneTaskState:
        ids = [u for u in pool_ids if u != target_id]
        return PruneTaskState.create(
            self.vectors[target_id], ids, self.vectors[ids], self.cfg.alpha_prune, self.R
        )

    def prune(self, target_id: int, pool_ids: Iterable[int]) -> list[int]:
        return prune_monolithic(self.prune_state(target_id, pool_ids))

    # -- tombstones --------------------------------------------------------
    def tombstone(self, ids: Iterable[int]) -> None:
        ids = list(ids)
        for v in ids:
            if not self.is_live(v):
                raise UnknownId(v)
        with self._tomb_lock:
            self.tombstones = self.tombstones | set(ids)

    # -- graph checks ------------------------------------------------------
    def reachable(self, start: int | None = None) -> set[int]:
        start = self.entry_point if start is None else start
        seen = {start}
        q = deque([start])
        while q:
            u = q.popleft()
            for v in self.adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        return seen

    def snapshot(self) -> list[list[int]]:
        return [list(a) for a in self.adjacency]

    def clone(self) -> "GraphIndex":
        """Independent in-memory copy (records, vectors, codes, tombstones)."""
        n = self.count
        store = MemoryStore(self.store.read(0, min(self.store.size(), self.offset(n))))
        idx = GraphIndex(self.cfg, self.compressed.quantizer, store, capacity=max(n, 1))
        idx.vectors[:n] = self.vectors[:n]
        idx.adjacency = [list(a) for a in self.adjacency]
        idx.tombstones = set(self.tombstones)
        idx.compressed.codes[:n] = self.compressed.codes[:n]
        idx.compressed.table[:n] = self.compressed.table[:n]
        idx.compressed.count = self.compressed.count
        idx.entry_point = self.entry_point
        return idx

    def max_degree(self) -> int:
        return max((len(a) for a in self.adjacency), default=0)

    # -- construction ------------------------------------------------------
    @classmethod
    def empty(cls, cfg: IndexConfig, quantizer: ScalarQuantizer, store=None) -> "GraphIndex":
        """Index with no nodes; the first allocated id becomes the entry point."""
        idx = cls(cfg, quantizer, store)
        idx.entry_point = 0
        return idx

    @classmethod
    def build(cls, vectors, cfg: IndexConfig, store=None, seed: int = 0) -> "GraphIndex":
        """Incremental insert-based construction starting from the medoid."""
        data = np.asarray(vectors, dtype=np.float32)
        if data.ndim != 2 or len(data) == 0:
            raise ValueError("need a non-empty 2-d array of vectors")
        if data.shape[1] != cfg.dim:
            raise DimensionMismatch(f"vectors have dim {data.shape[1]}, config says {cfg.dim}")
        if not np.isfinite(data).all():
            raise ValueError("vectors have non-finite components")
        n = len(data)
        quant = ScalarQuantizer.fit(data, cfg.quant_bits)
        idx = cls(cfg, quant, store, capacity=n)
        idx.vectors[:n] = data
        idx.adjacency = [[] for _ in range(n)]
        idx.compressed.set_many(data)
        idx.entry_point = medoid(data, seed)

        order = [idx.entry_point] + [v for v in range(n) if v != idx.entry_point]
        L = max(cfg.L_build, cfg.R)
        adj = idx.adjacency
        for p in order[1:]:
            cands = GreedySearch(idx, data[p], L, exclude=p).run().candidates()
            adj[p] = idx.prune(p, cands)
            for u in adj[p]:
                _add_back_edge(idx, u, p)
        _connect(idx)
        for v in range(n):
            idx.store.write(idx.offset(v), encode_record(NodeRecord(data[v], adj[v]), cfg))
        return idx

    # -- persistence -------------------------------------------------------
    def header_bytes(self, tomb_offset: int, tomb_len: int) -> bytes:
        head = _HEADER.pack(
            MAGIC, VERSION, self.dim, self.R, self.cfg.padded_record_size,
            self.count, self.entry_point, tomb_offset, tomb_len,
        )
        return head + bytes(self.cfg.header_size - len(head))

    def save(self, path) -> None:
        """Write header, records and tombstones to ``path``; codes to ``path.sqv``."""
        path = os.fspath(path)
        tomb_off = self.offset(self.count)
        tombs = sorted(self.tombstones)
        tomb_bytes = struct.pack(f"<{len(tombs)}Q", *tombs)
        if isinstance(self.store, FileStore) and os.path.abspath(self.store.path) == os.path.abspath(path):
            self.store.write(tomb_off, tomb_bytes)
            self.store.truncate(tomb_off + len(tomb_bytes))
            self.store.write(0, self.header_bytes(tomb_off, len(tombs)))
        else:
            with open(path, "wb") as f:
                f.write(self.header_bytes(tomb_off, len(tombs)))
                for v in range(self.count):
                    f.write(self.store.read(self.offset(v), self.cfg.padded_record_size))
                f.write(tomb_bytes)
        self.compressed.save(path + ".sqv")

    @classmethod
    def open(cls, path, in_memory: bool = True, alpha_prune: float = 1.2, L_build: int = 32) -> "GraphIndex":
        path = os.fspath(path)
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CorruptRecord("truncated header")
        magic, version, dim, R, padded, count, entry, tomb_off, tomb_len = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CorruptRecord(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CorruptRecord(f"{path}: unsupported version {version}")
        align = padded & -padded
        cfg = IndexConfig(dim=dim, R=R, L_build=L_build, alpha_prune=alpha_prune, record_align=align, entry_point=entry)
        if cfg.padded_record_size != padded:
            raise CorruptRecord("record size does not match header")
        compressed = CompressedVectors.load(path + ".sqv")
        if in_memory:
            with open(path, "rb") as f:
                store = MemoryStore(f.read())
        else:
            store = FileStore(path)
        idx = cls(cfg, compressed.quantizer, store, capacity=count)
        idx.compressed = compressed
        idx.entry_point = entry
        idx.adjacency = [[] for _ in range(count)]
        for v in range(count):
            rec = idx.read_node(v)
            idx.vectors[v] = rec.vector
            idx.adjacency[v] = rec.neighbors
        raw = store.read(tomb_off, 8 * tomb_len) if tomb_len else b""
        idx.tombstones = set(struct.unpack(f"<{tomb_len}Q", raw))
        return idx

    def close(self) -> None:
        self.store.close()


def _add_back_edge(idx: GraphIndex, u: int, p: int) -> None:
    nbrs = idx.adjacency[u]
    if p in nbrs:
        return
    if len(nbrs) < idx.R:
        nbrs.append(p)
    else:
        idx.adjacency[u] = idx.prune(u, nbrs + [p])


def _connect(idx: GraphIndex) -> None:
    """Give every node unreachable from the entry point an in-edge from a reachable one."""
    while True:
        seen = idx.reachable()
        if len(seen) == idx.count:
            return
        reach = np.array(sorted(seen))
        open_ = reach[[len(idx.adjacency[v]) < idx.R for v in reach]]
        if open_.size == 0:
            raise RuntimeError("cannot connect graph: every reachable node is at degree R")
        for u in range(idx.count):
            if u in seen:
                continue
            d = _distances(idx.vectors[open_], idx.vectors[u].astype(np.float64))
            host = int(open_[int(np.argmin(d))])
            idx.adjacency[host].append(u)
            break


def medoid(data: np.ndarray, seed: int = 0) -> int:
    """Index minimizing total distance to the data (to a 1,000-point sample when larger)."""
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if n <= MEDOID_SAMPLE:
        ref = data
    else:
        rng = np.random.default_rng(seed)
        ref = data[np.sort(rng.choice(n, MEDOID_SAMPLE, replace=False))]
    totals = np.empty(n)
    for start in range(0, n, 256):
        totals[start : start + 256] = cdist(data[start : start + 256], ref).sum(axis=1)
    return int(np.argmin(totals))
