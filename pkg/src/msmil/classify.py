"""Binary SVMs on bag histograms: fixed-kernel training and grid search.

The soft-margin dual is solved by sequential minimal optimization with
maximal-KKT-violation pair selection (tolerance 1e-3, iteration cap 1e6).
Labels map FN to -1 and PC to +1; a decision value of exactly zero
predicts PC.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (DataError, DegenerateLabelsError, DimensionError,
                     FormatError, NumericalError, SizeError)

GAMMA_GRID = (1e-3, 1e-4)
C_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 10 ** 6

LABEL_TO_SIGN = {"FN": -1, "PC": 1}
SIGN_TO_LABEL = {-1: "FN", 1: "PC"}

MAGIC = b"MSVM"
VERSION = 1
_KERNEL_BYTE = {"linear": 0, "rbf": 1}
_BYTE_KERNEL = {0: "linear", 1: "rbf"}


def kernel_matrix(kernel: str, a: np.ndarray, b: np.ndarray,
                  gamma: float | None = None) -> np.ndarray:
    """Gram matrix between row sets ``a`` and ``b`` in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        aa = np.einsum("ij,ij->i", a, a)
        bb = np.einsum("ij,ij->i", b, b)
        sq = np.maximum(aa[:, None] + bb[None, :] - 2.0 * (a @ b.T), 0.0)
        return np.exp(-gamma * sq)
    raise FormatError(f"unknown kernel {kernel!r}")


@dataclass
class SvmModel:
    """Trained classifier: support vectors, signed alphas and bias."""

    kernel: str
    gamma: float
    c: float
    support_vectors: np.ndarray = field(repr=False)
    dual_coef: np.ndarray = field(repr=False)  # signed alphas (alpha_i * y_i)
    bias: float

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.support_vectors.shape[1]:
            raise DimensionError(
                f"input width {x.shape[1]} does not match training width "
                f"{self.support_vectors.shape[1]}"
            )
        k = kernel_matrix(self.kernel, x, self.support_vectors, self.gamma)
        return k @ self.dual_coef + self.bias

    def storage_precision(self) -> "SvmModel":
        """Copy with support vectors and alphas rounded to float32.

        Matches what a file round trip produces, so staged and in-process
        pipelines predict identically.
        """
        return SvmModel(
            kernel=self.kernel, gamma=self.gamma, c=self.c,
            support_vectors=self.support_vectors.astype(np.float32)
                                                .astype(np.float64),
            dual_coef=self.dual_coef.astype(np.float32).astype(np.float64),
            bias=self.bias,
        )


def predict(model: SvmModel, x: np.ndarray):
    """Predicted sign labels (+1 = PC, ties to +1) and decision values."""
    decisions = model.decision_function(x)
    labels = np.where(decisions >= 0.0, 1, -1)
    return labels, decisions


def train_svm(x: np.ndarray, y: np.ndarray, kernel: str, c: float,
              gamma: float | None = None, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> SvmModel:
    """Train a soft-margin SVM via SMO.

    ``y`` holds -1/+1 labels; both classes must be present.  The decision
    function is f(x) = sum_i coef_i K(sv_i, x) + bias with coef the signed
    alphas, each bounded by ``c`` in magnitude.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"X shape {x.shape} inconsistent with {y.shape[0]} labels"
        )
    if not np.all(np.isfinite(x)):
        raise DataError("training histograms contain non-finite values")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("training data contains a single class")
    if c <= 0:
        raise DataError(f"cost factor must be positive, got {c}")
    if kernel == "rbf" and (gamma is None or gamma <= 0):
        raise DataError(f"RBF kernel needs gamma > 0, got {gamma}")
    if kernel == "linear":
        gamma = 0.0

    kmat = kernel_matrix(kernel, x, x, gamma)
    beta, bias, iterations, gap = _kernels.smo_solve(
        kmat, y, float(c), tol, max_iter)
    if gap > tol:
        raise NumericalError(
            f"SMO did not converge within {max_iter} iterations "
            f"(KKT gap {gap:.3e} > {tol:.0e})"
        )
    sv = beta != 0.0
    if not sv.any():
        raise NumericalError("SMO produced no support vectors")
    return SvmModel(kernel=kernel, gamma=float(gamma), c=float(c),
                    support_vectors=x[sv].copy(), dual_coef=beta[sv].copy(),
                    bias=bias)


@dataclass
class GridCell:
    kernel: str
    gamma: float | None
    c: float
    mean_acc: float
    fold_accs: tuple[float, ...]


@dataclass
class GridSearchReport:
    """Inner-CV accuracies for all 21 grid cells plus the chosen one."""

    cells: list[GridCell]
    chosen: int
    folds: int

    def chosen_cell(self) -> GridCell:
        return self.cells[self.chosen]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kernel", "gamma", "C", "mean_acc", "chosen"])
            for i, cell in enumerate(self.cells):
                writer.writerow([
                    cell.kernel,
                    "" if cell.gamma is None else f"{cell.gamma:.9g}",
                    f"{cell.c:.9g}", f"{cell.mean_acc:.9g}",
                    1 if i == self.chosen else 0,
                ])


def grid_cells() -> list[tuple[str, float | None, float]]:
    """All (kernel, gamma, C) cells in tie-break order.

    Ties resolve linear before RBF, then smaller C, then larger gamma, so
    the first cell attaining the best mean accuracy wins.
    """
    cells: list[tuple[str, float | None, float]] = [
        ("linear", None, c) for c in C_GRID
    ]
    for c in C_GRID:
        for gamma in sorted(GAMMA_GRID, reverse=True):
            cells.append(("rbf", gamma, c))
    return cells


def stratified_folds(y: np.ndarray, n_folds: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Fold index per sample: per-class shuffle dealt round-robin."""
    folds = np.empty(len(y), dtype=np.int64)
    for cls in (-1, 1):
        idx = np.flatnonzero(y == cls)
        perm = rng.permutation(idx)
        folds[perm] = np.arange(len(perm)) % n_folds
    return folds


def train_optimized(x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                    folds: int = 5, tol: float = DEFAULT_TOL):
    """Inner-cross-validated grid search, then retrain on all data.

    Stratified ``folds``-fold CV (folds shrink to the minority-class count,
    never below 2) over 7 linear + 14 RBF cells.  Returns the final model
    and the :class:`GridSearchReport`.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    class_counts = [int((y == cls).sum()) for cls in (-1, 1)]
    if min(class_counts) < 2:
        raise SizeError(
            f"grid search needs at least 2 samples per class, "
            f"got FN={class_counts[0]} PC={class_counts[1]}"
        )
    n_folds = min(folds, min(class_counts))
    fold_of = stratified_folds(y, n_folds, rng)

    report_cells = []
    for kernel, gamma, c in grid_cells():
        accs = []
        for f in range(n_folds):
            train, test = fold_of != f, fold_of == f
            model = train_svm(x[train], y[train], kernel, c, gamma, tol=tol)
            pred, _ = predict(model, x[test])
            accs.append(float(np.mean(pred == y[test])))
        report_cells.append(GridCell(kernel=kernel, gamma=gamma, c=c,
                                     mean_acc=float(np.mean(accs)),
                                     fold_accs=tuple(accs)))
    chosen = int(np.argmax([cell.mean_acc for cell in report_cells]))
    best = report_cells[chosen]
    final = train_svm(x, y, best.kernel, best.c, best.gamma, tol=tol)
    return final, GridSearchReport(cells=report_cells, chosen=chosen,
                                   folds=n_folds)


def write_model(path: str | Path, model: SvmModel) -> None:
    """Serialize: magic, version, kernel byte, gamma f64, C f64, n u32,
    width u32, support vectors and alphas as float32, bias f64."""
    sv = np.ascontiguousarray(model.support_vectors, dtype="<f4")
    coef = np.ascontiguousarray(model.dual_coef, dtype="<f4")
    head = MAGIC + struct.pack("<HBddII", VERSION, _KERNEL_BYTE[model.kernel],
                               model.gamma, model.c, sv.shape[0], sv.shape[1])
    Path(path).write_bytes(head + sv.tobytes() + coef.tobytes()
                           + struct.pack("<d", model.bias))


def read_model(path: str | Path) -> SvmModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an SVM model file", offset=0)
    head_fmt = "<HBddII"
    head_size = 4 + struct.calcsize(head_fmt)
    if len(data) < head_size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, kbyte, gamma, c, n, width = struct.unpack(
        head_fmt, data[4:head_size])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported model version {version}", offset=4)
    if kbyte not in _BYTE_KERNEL:
        raise FormatError(f"{path}: unknown kernel byte {kbyte}", offset=6)
    expected = head_size + n * width * 4 + n * 4 + 8
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}",
                          offset=min(len(data), expected))
    pos = head_size
    sv = np.frombuffer(data[pos:pos + n * width * 4], dtype="<f4") \
        .reshape(n, width).astype(np.float64)
    pos += n * width * 4
    coef = np.frombuffer(data[pos:pos + n * 4], dtype="<f4").astype(np.float64)
    pos += n * 4
    (bias,) = struct.unpack("<d", data[pos:pos + 8])
    return SvmModel(kernel=_BYTE_KERNEL[kbyte], gamma=gamma, c=c,
                    support_vectors=sv, dual_coef=coef, bias=bias)
