"""Vector containers, synthetic data and exact ground truth."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


class MalformedVectors(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """Either a ``path`` (.fvecs / .bvecs) or a synthetic mixture."""

    path: str | None = None
    n: int = 10_000
    dim: int = 16
    clusters: int = 64
    seed: int = 0
    spread: float = 4.0
    limit: int | None = None


def _read_vecs(path, item: np.dtype, limit: int | None) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=np.float32)
    if raw.size < 4:
        raise MalformedVectors(f"{path}: truncated header")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise MalformedVectors(f"{path}: bad dimension {dim}")
    rec = 4 + dim * item.itemsize
    if raw.size % rec:
        raise MalformedVectors(f"{path}: {raw.size} bytes is not a whole number of {rec}-byte records")
    rows = raw.reshape(-1, rec)
    dims = rows[:, :4].copy().view("<i4").ravel()
    if (dims != dim).any():
        bad = int(np.flatnonzero(dims != dim)[0])
        raise MalformedVectors(f"{path}: record {bad} has dim {dims[bad]}, expected {dim}")
    if limit is not None:
        rows = rows[:limit]
    body = np.ascontiguousarray(rows[:, 4:]).view(item.newbyteorder("<"))
    return body.reshape(len(rows), dim).astype(np.float32)


def read_fvecs(path, limit: int | None = None) -> np.ndarray:
    return _read_vecs(path, np.dtype(np.float32), limit)


def read_bvecs(path, limit: int | None = None) -> np.ndarray:
    return _read_vecs(path, np.dtype(np.uint8), limit)


def write_fvecs(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    n, d = data.shape
    out = np.empty((n, d + 1), dtype="<f4")
    out[:, 0] = np.array([d], dtype="<i4").view("<f4")[0]
    out[:, 1:] = data
    out.tofile(path)


def write_bvecs(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    n, d = data.shape
    out = np.empty((n, d + 4), dtype=np.uint8)
    out[:, :4] = np.frombuffer(np.array([d], dtype="<i4").tobytes(), dtype=np.uint8)
    out[:, 4:] = data
    out.tofile(path)


def synthetic(n: int, dim: int, clusters: int, seed: int, spread: float = 4.0) -> np.ndarray:
    """Gaussian mixture: unit-variance blobs around centers drawn with scale ``spread``."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(clusters, dim))
    labels = rng.integers(0, clusters, n)
    return (centers[labels] + rng.normal(size=(n, dim))).astype(np.float32)


def mixture_draws(spec: DatasetSpec, n: int, stream: int) -> np.ndarray:
    """Fresh points from the same mixture as ``synthetic(spec...)`` (same centers)."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(scale=spec.spread, size=(spec.clusters, spec.dim))
    draw = np.random.default_rng([spec.seed, stream])
    labels = draw.integers(0, spec.clusters, n)
    return (centers[labels] + draw.normal(size=(n, spec.dim))).astype(np.float32)


def load_vectors(spec: DatasetSpec) -> np.ndarray:
    if spec.path is None:
        return synthetic(spec.n, spec.dim, spec.clusters, spec.seed, spec.spread)
    ext = os.path.splitext(spec.path)[1].lower()
    if ext == ".fvecs":
        return read_fvecs(spec.path, spec.limit)
    if ext == ".bvecs":
        return read_bvecs(spec.path, spec.limit)
    raise ValueError(f"unsupported vector file {spec.path!r} (want .fvecs or .bvecs)")


def ground_truth(base: np.ndarray, queries: np.ndarray, K: int, exclude=None, chunk: int = 256) -> np.ndarray:
    """Exact L2 top-K ids per query; equal distances go to the lower id.

    Ids in ``exclude`` (e.g. tombstones) are never returned. Rows have fewer than K
    real entries only if fewer than K ids are eligible; the rest are -1.
    """
    base = np.asarray(base, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if base.shape[1] != queries.shape[1]:
        raise ValueError("dimension mismatch between base and queries")
    keep = np.ones(len(base), dtype=bool)
    if exclude is not None:
        ex = np.fromiter(exclude, dtype=np.int64)
        keep[ex[ex < len(base)]] = False
    ids = np.flatnonzero(keep)
    k = min(K, len(ids))
    out = np.full((len(queries), K), -1, dtype=np.int64)
    for s in range(0, len(queries), chunk):
        d = cdist(queries[s : s + chunk], base[ids])
        # stable sort keeps ascending id order among equal distances
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[s : s + chunk, :k] = ids[order]
    return out


def recall_at_k(found: list[list[int]], truth: np.ndarray, K: int) -> float:
    hits = 0
    total = 0
    for f, t in zip(found, truth):
        t = [v for v in t[:K] if v >= 0]
        hits += len(set(f[:K]) & set(t))
        total += len(t)
    return hits / total if total else float("nan")
