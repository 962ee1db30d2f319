from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import path3, random_connected, triangle
from lossydc.errors import IndefiniteMatrixError, SingularMatrixError
from lossydc.netmodel import build_topology
from lossydc.splinalg import DENSE_LIMIT, SpdOperator, factorize, factorize_lu, recover_angles, solve


def _random_laplacian(rng, n):
    """Reduced weighted Laplacian of a random connected graph on n+1 nodes."""
    net = random_connected(rng, n + 1, int(rng.integers(0, n + 1)))
    return build_topology(net).L_B


def test_identity():
    op = factorize(sp.identity(3, format="csc"))
    b = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(solve(op, b), b)


def test_path_laplacian():
    op = factorize(np.array([[2.0, -1.0], [-1.0, 1.0]]))
    np.testing.assert_allclose(op.solve([1.0, 0.0]), [1.0, 1.0], atol=1e-14)


def test_indefinite_dense():
    with pytest.raises(IndefiniteMatrixError):
        factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_indefinite_sparse():
    n = DENSE_LIMIT + 10
    M = sp.diags(np.r_[np.ones(n - 1), -1.0]).tocsc()
    with pytest.raises(IndefiniteMatrixError):
        factorize(M)


def test_singular_laplacian_of_disconnected_graph():
    # full (unreduced) Laplacian is only semidefinite
    n = DENSE_LIMIT + 5
    main = np.r_[1.0, 2.0 * np.ones(n - 2), 1.0]
    M = sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1]).tocsc()
    with pytest.raises(IndefiniteMatrixError):
        factorize(M)


def test_asymmetric_rejected():
    with pytest.raises(ValueError):
        factorize(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_dimension_mismatch():
    op = factorize(np.eye(3))
    with pytest.raises(ValueError):
        op.solve(np.ones(4))


def test_zero_rhs():
    rng = np.random.default_rng(0)
    op = factorize(_random_laplacian(rng, 80))
    np.testing.assert_array_equal(op.solve(np.zeros(80)), np.zeros(80))


@pytest.mark.parametrize("n", [10, 120])
def test_column_of_matrix_gives_unit_vector(n):
    rng = np.random.default_rng(n)
    M = _random_laplacian(rng, n)
    op = factorize(M)
    j = n // 2
    x = op.solve(M[:, j].toarray().ravel())
    e = np.zeros(n)
    e[j] = 1.0
    np.testing.assert_allclose(x, e, atol=1e-10)


def test_sparse_backend_uses_fill_reducing_permutation():
    rng = np.random.default_rng(3)
    op = factorize(_random_laplacian(rng, 150))
    assert op.backend == "sparse"
    assert sorted(op.permutation) == list(range(150))


def test_repeated_solves_match_refactorization():
    rng = np.random.default_rng(5)
    for n in (20, 100):
        M = _random_laplacian(rng, n)
        op = factorize(M)
        for _ in range(500):
            b = rng.standard_normal(n)
            np.testing.assert_allclose(op.solve(b), factorize(M).solve(b), rtol=0, atol=1e-12)


def test_solve_count_tracks_reuse():
    rng = np.random.default_rng(6)
    op = factorize(_random_laplacian(rng, 60))
    for _ in range(17):
        op.solve(rng.standard_normal(60))
    assert op.solve_count == 17


def test_residual_bound_on_random_laplacians():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        M = _random_laplacian(rng, n)
        b = rng.standard_normal(n) * 10.0 ** rng.uniform(-3, 3)
        x = factorize(M).solve(b)
        assert np.max(np.abs(M @ x - b)) <= 1e-10 * max(1.0, np.max(np.abs(b)))


def test_empty_operator():
    op = SpdOperator(sp.csc_matrix((0, 0)))
    assert op.solve(np.zeros(0)).shape == (0,)


def test_lu_singular():
    with pytest.raises(SingularMatrixError):
        factorize_lu(np.array([[1.0, 2.0], [2.0, 4.0]]))


# ---------------------------------------------------------------- angle recovery

def test_recover_angles_on_path():
    cache = build_topology(path3())
    # branch (slack->1) then (1->2): differences are theta_from - theta_to
    theta = recover_angles(cache.A_r, np.array([-0.1, -0.2]))
    np.testing.assert_allclose(theta, [0.1, 0.3], atol=1e-14)


def test_recover_angles_consistent_system():
    rng = np.random.default_rng(9)
    for _ in range(50):
        cache = build_topology(random_connected(rng, int(rng.integers(2, 40)), int(rng.integers(0, 20))))
        v = rng.standard_normal(cache.n)
        np.testing.assert_allclose(recover_angles(cache.A_r, cache.A_r.T @ v), v, atol=1e-10)


def test_recover_angles_least_squares_on_triangle():
    cache = build_topology(triangle())
    d = np.array([0.1, 0.1, -0.25])
    theta = recover_angles(cache.A_r, d)
    oracle = np.linalg.pinv(cache.A_r.T.toarray()) @ d
    np.testing.assert_allclose(theta, oracle, atol=1e-14)
    resid = cache.A_r.T @ theta - d
    # the loop is inconsistent by 0.05; least squares spreads it evenly over the three branches
    assert d.sum() == pytest.approx(-0.05)
    np.testing.assert_allclose(resid, np.full(3, 0.05 / 3), atol=1e-14)


def test_recover_angles_is_idempotent():
    rng = np.random.default_rng(10)
    cache = build_topology(random_connected(rng, 30, 12))
    d = rng.standard_normal(cache.m)
    theta = recover_angles(cache.A_r, d, cache.angle_op)
    again = recover_angles(cache.A_r, cache.A_r.T @ theta, cache.angle_op)
    np.testing.assert_allclose(again, theta, atol=1e-12)
