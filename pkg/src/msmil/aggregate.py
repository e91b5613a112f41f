"""Bag-of-words aggregation of per-scale features into slide histograms.

Four strategies share one interface:

* ``baseline`` - codebook on scale-1 vectors only, histogram width k.
* ``MC``   - per-patch concatenation across scales (1, 1/2, 1/4) into
  1536-wide vectors, one codebook, width k.
* ``MA``   - all scales pooled as extra 512-wide vectors (3 * nP rows per
  slide), one codebook, width k.
* ``MM``   - an independent codebook per scale (seeds seed, seed+1,
  seed+2); per-scale histograms concatenated in scale order to width 3k,
  normalized once over all entries.

Histograms are L1-normalized.  Aug1 augmentation subsamples 75% of the
patch triples (the same index set across scales) eight times per bag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codebook import Codebook, assign, fit_kmeans
from .errors import DimensionError, FormatError, SizeError
from .features import FEATURE_DIM, FeatureBag
from .slide import SCALES

METHODS = ("baseline", "MC", "MA", "MM")
AUG1_COPIES = 8
AUG1_KEEP = 0.75


@dataclass
class BagHistogram:
    """L1-normalized cluster-frequency vector for one slide."""

    slide_id: str
    label: str | None
    method: str
    k: int
    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[0]


@dataclass
class AggregationModel:
    """Fitted codebook(s) for one aggregation method."""

    method: str
    k: int
    codebooks: tuple[Codebook, ...] = field(repr=False)

    def __post_init__(self):
        expected = {"baseline": 1, "MC": 1, "MA": 1, "MM": 3}[self.method]
        if len(self.codebooks) != expected:
            raise DimensionError(
                f"{self.method} needs {expected} codebook(s), "
                f"got {len(self.codebooks)}"
            )
        d = 3 * FEATURE_DIM if self.method == "MC" else FEATURE_DIM
        for cb in self.codebooks:
            if cb.d != d:
                raise DimensionError(
                    f"{self.method} codebook dimension {cb.d}, expected {d}"
                )

    @property
    def width(self) -> int:
        return 3 * self.k if self.method == "MM" else self.k


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise FormatError(f"unknown aggregation method {method!r}; "
                          f"expected one of {METHODS}")


def _concat_rows(bag: FeatureBag) -> np.ndarray:
    """Per-patch concatenation in scale order 1, 1/2, 1/4 (MC rows)."""
    return np.hstack([bag.per_scale[s] for s in SCALES])


def _pooled_rows(bag: FeatureBag) -> np.ndarray:
    """All scales stacked as independent 512-wide rows (MA rows)."""
    return np.vstack([bag.per_scale[s] for s in SCALES])


def training_matrix(method: str, bags: Sequence[FeatureBag],
                    scale: float | None = None) -> np.ndarray:
    """Rows a codebook for ``method`` is fit on (MM: one scale at a time)."""
    _check_method(method)
    if method == "baseline":
        return np.vstack([bag.per_scale[1.0] for bag in bags])
    if method == "MC":
        return np.vstack([_concat_rows(bag) for bag in bags])
    if method == "MA":
        return np.vstack([_pooled_rows(bag) for bag in bags])
    if scale not in SCALES:
        raise DimensionError(f"MM training matrix needs a scale, got {scale!r}")
    return np.vstack([bag.per_scale[scale] for bag in bags])


def fit_aggregator(method: str, training_bags: Sequence[FeatureBag], k: int,
                   seed: int, **kmeans_kwargs) -> AggregationModel:
    """Fit the method's codebook(s) on training bags only."""
    _check_method(method)
    if not training_bags:
        raise SizeError(f"{method}: no training bags")

    def fit(matrix: np.ndarray, fit_seed: int) -> Codebook:
        if matrix.shape[0] < k:
            raise SizeError(
                f"{method}: {matrix.shape[0]} training vectors are too few "
                f"for k={k}"
            )
        return fit_kmeans(matrix, k, fit_seed, **kmeans_kwargs)

    if method == "MM":
        codebooks = tuple(
            fit(training_matrix("MM", training_bags, scale=s), seed + i)
            for i, s in enumerate(SCALES)
        )
    else:
        codebooks = (fit(training_matrix(method, training_bags), seed),)
    return AggregationModel(method=method, k=k, codebooks=codebooks)


def _counts(codebook: Codebook, rows: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(assign(codebook, rows), minlength=k).astype(np.float64)


def histogram(model: AggregationModel, bag: FeatureBag) -> BagHistogram:
    """Cluster-frequency histogram of one bag under a fitted model."""
    k = model.k
    if model.method == "baseline":
        counts = _counts(model.codebooks[0], bag.per_scale[1.0], k)
    elif model.method == "MC":
        counts = _counts(model.codebooks[0], _concat_rows(bag), k)
    elif model.method == "MA":
        counts = _counts(model.codebooks[0], _pooled_rows(bag), k)
    else:  # MM: per-scale counts concatenated, normalized once
        counts = np.concatenate([
            _counts(cb, bag.per_scale[s], k)
            for cb, s in zip(model.codebooks, SCALES)
        ])
    values = counts / counts.sum()
    return BagHistogram(slide_id=bag.slide_id, label=bag.label,
                        method=model.method, k=k, values=values)


def augment_aug1(bag: FeatureBag, rng: np.random.Generator) -> list[FeatureBag]:
    """Eight 75% subsamples of a bag's patch triples.

    Each copy keeps floor(0.75 * nP) triple indices, drawn uniformly
    without replacement and applied to all three scales, preserving row
    correspondence.  The original bag is not part of the result.
    """
    n = bag.n_patches
    if n < 4:
        raise SizeError(f"Aug1 needs at least 4 patches, bag has {n}")
    keep = (3 * n) // 4
    copies = []
    for i in range(AUG1_COPIES):
        idx = np.sort(rng.choice(n, size=keep, replace=False))
        per_scale = {s: bag.per_scale[s][idx] for s in SCALES}
        copies.append(FeatureBag(slide_id=f"{bag.slide_id}#aug{i}",
                                 label=bag.label, per_scale=per_scale))
    return copies


def quantize_histogram(values: np.ndarray) -> np.ndarray:
    """Round to 9 significant decimal digits, the CSV export precision.

    Applying this before classification makes in-process results identical
    to results routed through the histogram CSV.
    """
    return np.array([float(f"{v:.9g}") for v in values], dtype=np.float64)


def write_histograms(path: str | Path, hists: Iterable[BagHistogram]) -> None:
    """CSV export: slide_id, label, method, k, h0..h(w-1), 9 digits."""
    hists = list(hists)
    if not hists:
        raise SizeError("no histograms to write")
    width = hists[0].width
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "label", "method", "k"]
                        + [f"h{i}" for i in range(width)])
        for h in hists:
            if h.width != width:
                raise DimensionError(
                    f"histogram widths differ: {h.width} vs {width}"
                )
            writer.writerow([h.slide_id, h.label or "", h.method, h.k]
                            + [f"{v:.9g}" for v in h.values])


def read_histograms(path: str | Path) -> list[BagHistogram]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["slide_id", "label", "method", "k"]:
            raise FormatError(f"{path}: not a histogram CSV (bad header)")
        width = len(header) - 4
        hists = []
        for line, row in enumerate(reader, start=2):
            if len(row) != width + 4:
                raise FormatError(
                    f"{path}:{line}: expected {width + 4} fields, got {len(row)}"
                )
            values = np.array([float(v) for v in row[4:]], dtype=np.float64)
            hists.append(BagHistogram(slide_id=row[0], label=row[1] or None,
                                      method=row[2], k=int(row[3]),
                                      values=values))
    return hists
