"""Uniform per-dimension scalar quantizer for in-memory approximate distances."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SIDECAR_MAGIC = b"LIOSSQV1"
SIDECAR_VERSION = 1


@dataclass
class ScalarQuantizer:
    lo: np.ndarray
    scale: np.ndarray
    bits: int = 8

    @classmethod
    def fit(cls, data: np.ndarray, bits: int = 8) -> "ScalarQuantizer":
        if not 1 <= bits <= 16:
            raise ValueError("bits must be in [1, 16]")
        data = np.asarray(data, dtype=np.float64)
        lo = data.min(axis=0)
        hi = data.max(axis=0)
        levels = (1 << bits) - 1
        scale = (hi - lo) / levels
        # A constant dimension decodes to lo regardless of its code.
        scale[scale == 0] = 0.0
        return cls(lo=lo.astype(np.float32), scale=scale.astype(np.float32), bits=bits)

    @property
    def dtype(self):
        return np.uint8 if self.bits <= 8 else np.uint16

    @property
    def max_abs_error(self) -> np.ndarray:
        """Per-component reconstruction bound for values inside the fitted range."""
        return self.scale.astype(np.float64) / 2

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        scale = self.scale.astype(np.float64)
        safe = np.where(scale > 0, scale, 1.0)
        q = np.rint((v - self.lo.astype(np.float64)) / safe)
        q = np.where(scale > 0, q, 0.0)
        return np.clip(q, 0, (1 << self.bits) - 1).astype(self.dtype)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        return (self.lo.astype(np.float64) + np.asarray(codes, dtype=np.float64) * self.scale.astype(np.float64)).astype(
            np.float32
        )


class CompressedVectors:
    """Codes for every id plus a decoded float table used for distance estimates."""

    def __init__(self, quantizer: ScalarQuantizer, dim: int, capacity: int = 0) -> None:
        self.quantizer = quantizer
        self.dim = dim
        self.codes = np.zeros((max(capacity, 1), dim), dtype=quantizer.dtype)
        self.table = np.zeros((max(capacity, 1), dim), dtype=np.float32)
        self.count = 0

    @property
    def bits(self) -> int:
        return self.quantizer.bits

    def _grow(self, need: int) -> None:
        if need <= len(self.codes):
            return
        cap = max(need, 2 * len(self.codes))
        codes = np.zeros((cap, self.dim), dtype=self.codes.dtype)
        codes[: self.count] = self.codes[: self.count]
        table = np.zeros((cap, self.dim), dtype=np.float32)
        table[: self.count] = self.table[: self.count]
        self.codes, self.table = codes, table

    def set(self, vid: int, vector: np.ndarray) -> None:
        self._grow(vid + 1)
        code = self.quantizer.encode(vector)[0]
        self.codes[vid] = code
        self.table[vid] = self.quantizer.decode(code)
        self.count = max(self.count, vid + 1)

    def set_many(self, vectors: np.ndarray) -> None:
        n = len(vectors)
        self._grow(n)
        self.codes[:n] = self.quantizer.encode(vectors)
        self.table[:n] = self.quantizer.decode(self.codes[:n])
        self.count = max(self.count, n)

    def approx_distances(self, query: np.ndarray, ids) -> np.ndarray:
        """L2 distance from a raw query to the decoded codes of ``ids``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.count):
            raise KeyError("id not encoded")
        diff = self.table[ids].astype(np.float64) - query
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def approx_distance(self, query: np.ndarray, vid: int) -> float:
        return float(self.approx_distances(np.asarray(query, dtype=np.float64), [vid])[0])

    # sidecar file: magic, version u32, dim u32, bits u32, count u64, lo f32[dim], scale f32[dim], codes
    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(SIDECAR_MAGIC)
            f.write(struct.pack("<IIIQ", SIDECAR_VERSION, self.dim, self.bits, self.count))
            f.write(self.quantizer.lo.astype("<f4").tobytes())
            f.write(self.quantizer.scale.astype("<f4").tobytes())
            f.write(self.codes[: self.count].astype(self.codes.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "CompressedVectors":
        with open(path, "rb") as f:
            data = f.read()
        if data[:8] != SIDECAR_MAGIC:
            raise ValueError(f"{path}: bad sidecar magic")
        version, dim, bits, count = struct.unpack_from("<IIIQ", data, 8)
        if version != SIDECAR_VERSION:
            raise ValueError(f"{path}: unsupported sidecar version {version}")
        off = 8 + struct.calcsize("<IIIQ")
        lo = np.frombuffer(data, "<f4", dim, off).copy()
        off += 4 * dim
        scale = np.frombuffer(data, "<f4", dim, off).copy()
        off += 4 * dim
        q = ScalarQuantizer(lo=lo, scale=scale, bits=bits)
        dt = np.dtype(q.dtype).newbyteorder("<")
        codes = np.frombuffer(data, dt, count * dim, off).reshape(count, dim)
        cv = cls(q, dim, count)
        cv.codes[:count] = codes
        cv.table[:count] = q.decode(codes)
        cv.count = count
        return cv
