"""Cross-backend equivalence of the compiled and NumPy kernels, plus an
independent QP check of the SMO solver."""

import numpy as np
import pytest

from msmil._kernels import _fallback, assign_points, backend_name

try:
    from msmil._kernels import _core
except ImportError:
    _core = None

needs_ext = pytest.mark.skipif(_core is None,
                               reason="compiled extension not built")


def gen(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def random_problem(rng, n=24, d=3, c=4.0):
    x = rng.standard_normal((n, d))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    y[0], y[1] = -1.0, 1.0  # both classes present
    kmat = x @ x.T
    return kmat, y, c


def test_backend_reports_name():
    assert backend_name() in ("cython", "numpy")


def test_assign_points_matches_bruteforce():
    rng = gen(1)
    x = rng.standard_normal((50, 7))
    c = rng.standard_normal((9, 7))
    labels, sqd = assign_points(x, c)
    brute = np.array([
        int(np.argmin([((p - cj) ** 2).sum() for cj in c])) for p in x
    ])
    assert np.array_equal(labels, brute)
    direct = ((x - c[labels]) ** 2).sum(axis=1)
    np.testing.assert_allclose(sqd, direct, rtol=1e-12)


def test_assign_points_tie_lowest_index():
    c = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    labels, _ = assign_points(np.array([[1.0, 0.0], [0.5, 0.0]]), c)
    assert labels[0] == 0  # exact tie between duplicates 0 and 1
    assert labels[1] == 0  # equidistant from centroids 0/1 and 2


@needs_ext
def test_cluster_sums_backends_agree():
    rng = gen(2)
    x = rng.standard_normal((200, 16))
    labels = rng.integers(0, 7, size=200)
    s1, c1 = _core.cluster_sums(x, labels, 7)
    s2, c2 = _fallback.cluster_sums(x, labels, 7)
    assert np.array_equal(c1, c2)
    np.testing.assert_allclose(s1, s2, rtol=1e-13, atol=1e-13)


def test_cluster_sums_empty_cluster_zero():
    x = np.ones((4, 2))
    sums, counts = _fallback.cluster_sums(x, np.zeros(4, np.int64), 3)
    assert counts.tolist() == [4, 0, 0]
    assert np.array_equal(sums[1:], np.zeros((2, 2)))


@needs_ext
def test_smo_backends_bit_identical():
    for seed in range(8):
        kmat, y, c = random_problem(gen(seed))
        b1, bias1, it1, gap1 = _core.smo_solve(kmat, y, c, 1e-6, 10 ** 6)
        b2, bias2, it2, gap2 = _fallback.smo_solve(kmat, y, c, 1e-6, 10 ** 6)
        assert it1 == it2
        assert np.array_equal(b1, b2)
        assert bias1 == bias2


def test_smo_respects_box_and_equality():
    for seed in range(6):
        kmat, y, c = random_problem(gen(seed + 10), n=30)
        beta, _, _, gap = _fallback.smo_solve(kmat, y, c, 1e-4, 10 ** 6)
        assert gap <= 1e-4
        alphas = y * beta
        assert np.all(alphas >= -1e-12)
        assert np.all(alphas <= c + 1e-12)
        assert abs(beta.sum()) < 1e-9


def test_smo_agrees_with_qp_oracle():
    cvxopt = pytest.importorskip("cvxopt")
    from cvxopt import matrix, solvers
    solvers.options["show_progress"] = False
    for seed in (3, 4, 5):
        kmat, y, c = random_problem(gen(seed), n=20, d=4, c=2.0)
        beta, _, _, _ = _fallback.smo_solve(kmat, y, c, 1e-8, 10 ** 6)
        # dual QP in alpha: min 1/2 a' Q a - 1'a, 0 <= a <= C, y'a = 0
        q = matrix(np.outer(y, y) * kmat)
        p = matrix(-np.ones(len(y)))
        g = matrix(np.vstack([-np.eye(len(y)), np.eye(len(y))]))
        h = matrix(np.concatenate([np.zeros(len(y)), np.full(len(y), c)]))
        a = matrix(y.reshape(1, -1))
        sol = solvers.qp(q, p, g, h, a, matrix([0.0]))
        alpha_qp = np.array(sol["x"]).ravel()

        def dual_objective(alpha):
            return 0.5 * alpha @ (np.outer(y, y) * kmat) @ alpha - alpha.sum()

        assert dual_objective(y * beta) <= dual_objective(alpha_qp) + 1e-6


def test_smo_immediate_convergence_degenerate_c():
    # with a tiny C the solver still terminates and respects the box
    kmat, y, _ = random_problem(gen(42), n=10)
    beta, _, _, gap = _fallback.smo_solve(kmat, y, 1e-9, 1e-4, 10 ** 6)
    assert np.all(np.abs(beta) <= 1e-9 + 1e-18)
