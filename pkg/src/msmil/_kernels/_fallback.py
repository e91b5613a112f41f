"""NumPy implementations of the sequential hot loops.

Selected at import time by :mod:`msmil._kernels` when the compiled Cython
extension is unavailable.  Both implementations follow the same algorithm
and tie-break rules; within one installation results are deterministic.
"""

import numpy as np

BACKEND = "numpy"


def cluster_sums(x: np.ndarray, labels: np.ndarray, k: int):
    """Per-cluster coordinate sums and member counts.

    Points are accumulated in ascending point order within each cluster
    (stable sort), matching the compiled kernel's iteration order.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    order = np.argsort(labels, kind="stable")
    boundaries = np.zeros(k, dtype=np.int64)
    boundaries[1:] = np.cumsum(counts)[:-1]
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    occupied = counts > 0
    if occupied.any():
        segs = np.add.reduceat(x[order], boundaries[occupied], axis=0)
        sums[occupied] = segs
    return sums, counts


def smo_solve(kmat: np.ndarray, y: np.ndarray, c: float, tol: float,
              max_iter: int):
    """Maximal-violating-pair SMO for the soft-margin SVM dual.

    Works in the box variables ``beta_i = y_i * alpha_i`` with
    ``beta_i in [A_i, B_i]`` and ``sum(beta) = 0``; the gradient is
    ``G = K beta - y``.  Each step picks ``i`` minimizing ``G`` among
    coordinates free to increase and ``j`` maximizing ``G`` among those
    free to decrease, then moves ``lambda`` along ``(e_i, -e_j)``.

    Returns ``(beta, bias, iterations, gap)`` where ``gap`` is the final
    KKT violation ``G_j - G_i``.
    """
    n = len(y)
    kmat = np.ascontiguousarray(kmat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    upper = np.where(y > 0, c, 0.0)
    lower = np.where(y > 0, 0.0, -c)
    beta = np.zeros(n)
    grad = -y.copy()

    it = 0
    gap = np.inf
    i = j = 0
    while it < max_iter:
        gi = np.where(beta < upper, grad, np.inf)
        gj = np.where(beta > lower, grad, -np.inf)
        i = int(np.argmin(gi))
        j = int(np.argmax(gj))
        gap = gj[j] - gi[i]
        if not np.isfinite(gap) or gap <= tol:
            break
        a = kmat[i, i] + kmat[j, j] - 2.0 * kmat[i, j]
        if a <= 0.0:
            a = 1e-12
        lam = min(upper[i] - beta[i], beta[j] - lower[j], gap / a)
        beta[i] += lam
        beta[j] -= lam
        grad += lam * (kmat[i] - kmat[j])
        it += 1

    bias = -0.5 * (grad[i] + grad[j])
    return beta, float(bias), it, float(gap)
