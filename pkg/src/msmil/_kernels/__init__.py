"""Compute kernels for clustering and the SVM solver.

``assign_points`` is shared by every installation: its cost is one matrix
product, which already runs in compiled BLAS.  The sequential loops that
dominate elsewhere (``smo_solve``, ``cluster_sums``) come from the Cython
extension when it was built, else from the NumPy fallback.  Set
``MSMIL_KERNELS=numpy`` to force the fallback (benchmarks, tests).
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("MSMIL_KERNELS", "").lower() == "numpy":
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _fallback

cluster_sums = _impl.cluster_sums
smo_solve = _impl.smo_solve
BACKEND = _impl.BACKEND


def backend_name() -> str:
    """Name of the active kernel backend ("cython" or "numpy")."""
    return BACKEND


def assign_points(x: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid assignment under squared Euclidean distance.

    The argmin uses the expanded form |x|^2 + |c|^2 - 2 x.c (one BLAS
    product); exact ties (equal centroids) resolve to the lowest index.
    Returned squared distances are recomputed directly against the
    assigned centroid, avoiding the expansion's cancellation error.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    xx = np.einsum("ij,ij->i", x, x)
    cc = np.einsum("ij,ij->i", centroids, centroids)
    d2 = xx[:, None] + cc[None, :] - 2.0 * (x @ centroids.T)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    diff = x - centroids[labels]
    sqdists = np.einsum("ij,ij->i", diff, diff)
    return labels, sqdists
