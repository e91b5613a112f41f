"""k-means codebooks over feature vectors (Lloyd + k-means++, Euclidean).

Fitting runs in float64 and rounds the final centroids to float32, the
canonical storage precision, so in-process codebooks and file round trips
agree bit for bit.  Assignment ties resolve to the lowest centroid index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DataError, DimensionError, FormatError, SizeError

MAGIC = b"MSKB"
VERSION = 1


@dataclass
class Codebook:
    """k centroids plus the seed that produced them."""

    centroids: np.ndarray  # (k, d) float32
    train_seed: int
    inertia: float | None = None
    # per-iteration inertia trace from fitting (diagnostics, not serialized)
    history: list[float] | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, then D^2 sampling."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[int(rng.integers(n))]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:  # fewer distinct points than centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _restart_seed(seed: int, restart: int) -> int:
    if restart == 0:
        return seed
    return (seed + 0x9E3779B97F4A7C15 * restart) % (1 << 64)


def _lloyd(x: np.ndarray, k: int, seed: int, max_iters: int, tol: float):
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeans_pp_init(x, k, rng)
    history: list[float] = []
    prev_labels = None
    for _ in range(max_iters):
        labels, sqd = _kernels.assign_points(x, centroids)
        history.append(float(sqd.sum()))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        sums, counts = _kernels.cluster_sums(x, labels, k)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            # reseed each empty cluster to the point farthest from its centroid
            sqd_pool = sqd.copy()
            for e in empties:
                far = int(np.argmax(sqd_pool))
                sums[labels[far]] -= x[far]
                counts[labels[far]] -= 1
                sums[e] = x[far]
                counts[e] = 1
                sqd_pool[far] = -1.0
            prev_labels = None  # membership changed outside the labels array
        # a donor cluster emptied by reseeding keeps its previous centroid
        safe = np.maximum(counts, 1)[:, None]
        new_centroids = np.where(counts[:, None] > 0, sums / safe, centroids)
        displacement = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if displacement < tol:
            break
    return centroids, history


def fit_kmeans(data: np.ndarray, k: int, seed: int, max_iters: int = 100,
               tol: float = 1e-4, restarts: int = 1) -> Codebook:
    """Fit a codebook; deterministic for a given seed.

    Lloyd iterations start from a k-means++ initialization and stop when
    the maximum centroid displacement drops below ``tol`` (or assignments
    stop changing, or ``max_iters`` is hit).  Empty clusters are reseeded
    to the point farthest from its assigned centroid.  With ``restarts``
    > 1 the lowest-inertia run wins; restart r uses a seed derived from
    ``seed`` (restart 0 uses ``seed`` itself).
    """
    x = np.ascontiguousarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise SizeError(f"k must be >= 1, got {k}")
    if n < k:
        raise SizeError(f"cannot fit {k} clusters to {n} points")
    if not np.all(np.isfinite(x)):
        raise DataError("training data contains non-finite values")

    best: Codebook | None = None
    for r in range(max(1, restarts)):
        run_seed = _restart_seed(seed, r)
        centroids64, history = _lloyd(x, k, run_seed, max_iters, tol)
        centroids = centroids64.astype(np.float32)
        _, sqd = _kernels.assign_points(x, centroids.astype(np.float64))
        inertia = float(sqd.sum())
        history.append(inertia)
        if best is None or inertia < best.inertia:
            best = Codebook(centroids=centroids, train_seed=seed,
                            inertia=inertia, history=history)
    return best


def assign(codebook: Codebook, vectors: np.ndarray):
    """Index of the nearest centroid (lowest index on exact ties).

    Accepts a single vector (returns int) or a matrix (returns an int64
    array, one index per row).
    """
    v = np.asarray(vectors, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != codebook.d:
        raise DimensionError(
            f"vector dimension {v.shape[-1] if v.ndim else v.shape} does not "
            f"match codebook dimension {codebook.d}"
        )
    labels, _ = _kernels.assign_points(v, codebook.centroids.astype(np.float64))
    return int(labels[0]) if single else labels


def write_codebook(path: str | Path, codebook: Codebook) -> None:
    """Serialize: magic, version u16, k u32, d u32, seed u64, k*d float32."""
    header = MAGIC + struct.pack("<HIIQ", VERSION, codebook.k, codebook.d,
                                 codebook.train_seed % (1 << 64))
    body = np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_codebook(path: str | Path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a codebook file", offset=0)
    header_size = 4 + struct.calcsize("<HIIQ")
    if len(data) < header_size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, k, d, seed = struct.unpack("<HIIQ", data[4:header_size])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}",
                          offset=4)
    expected = header_size + k * d * 4
    if len(data) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for k={k} d={d}, "
            f"got {len(data)}", offset=min(len(data), expected),
        )
    centroids = np.frombuffer(data[header_size:], dtype="<f4").reshape(k, d)
    if not np.all(np.isfinite(centroids)):
        raise FormatError(f"{path}: non-finite centroid values",
                          offset=header_size)
    return Codebook(centroids=centroids.astype(np.float32), train_seed=seed)
