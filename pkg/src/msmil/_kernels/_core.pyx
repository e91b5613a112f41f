# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: the cluster-sum sweep and the SMO solver loop.

Mirrors :mod:`msmil._kernels._fallback`; same selection and tie-break
rules, sequential float64 accumulation.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def cluster_sums(x, labels, k):
    """Per-cluster coordinate sums and counts, ascending point order."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] xa = \
        np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1, mode="c"] la = \
        np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = xa.shape[0], d = xa.shape[1], kk = k
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sums = np.zeros((kk, d), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(kk, dtype=np.int64)
    cdef double[:, ::1] xv = xa
    cdef double[:, ::1] sv = sums
    cdef long long[::1] lv = la
    cdef long long[::1] cv = counts
    cdef Py_ssize_t i, t
    cdef long long lab
    with nogil:
        for i in range(n):
            lab = lv[i]
            cv[lab] += 1
            for t in range(d):
                sv[lab, t] += xv[i, t]
    return sums, counts


def smo_solve(kmat, y, double c, double tol, long long max_iter):
    """Maximal-violating-pair SMO on the box variables beta = y * alpha.

    Same update rule as the NumPy fallback; returns
    ``(beta, bias, iterations, gap)``.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] ka = \
        np.ascontiguousarray(kmat, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] ya = \
        np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = ya.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] beta = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad = -ya.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] upper = \
        np.where(ya > 0, c, 0.0).astype(np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] lower = \
        np.where(ya > 0, 0.0, -c).astype(np.float64)
    cdef double[:, ::1] kv = ka
    cdef double[::1] bv = beta
    cdef double[::1] gv = grad
    cdef double[::1] uv = upper
    cdef double[::1] lo = lower
    cdef Py_ssize_t i, j, t
    cdef long long it = 0
    cdef double gi, gj, gap = np.inf, a, lam, room_i, room_j
    cdef bint found_i, found_j
    i = j = 0
    with nogil:
        while it < max_iter:
            gi = 0.0
            gj = 0.0
            found_i = found_j = False
            for t in range(n):
                if bv[t] < uv[t] and (not found_i or gv[t] < gi):
                    gi = gv[t]
                    i = t
                    found_i = True
                if bv[t] > lo[t] and (not found_j or gv[t] > gj):
                    gj = gv[t]
                    j = t
                    found_j = True
            if not found_i or not found_j:
                gap = 0.0
                break
            gap = gj - gi
            if gap <= tol:
                break
            a = kv[i, i] + kv[j, j] - 2.0 * kv[i, j]
            if a <= 0.0:
                a = 1e-12
            room_i = uv[i] - bv[i]
            room_j = bv[j] - lo[j]
            lam = gap / a
            if room_i < lam:
                lam = room_i
            if room_j < lam:
                lam = room_j
            bv[i] += lam
            bv[j] -= lam
            for t in range(n):
                gv[t] += lam * (kv[i, t] - kv[j, t])
            it += 1
    bias = -0.5 * (gv[i] + gv[j])
    return beta, float(bias), int(it), float(gap)
