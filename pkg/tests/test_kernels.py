"""Kernel contracts: factorizations, solves, norms, determinism."""

import numpy as np
import pytest

from fedridge.kernels import (
    DimensionMismatch,
    NoConvergence,
    NotSPD,
    ZeroReference,
    cholesky_spd,
    frobenius_norm,
    rel_frobenius_dev,
    solve_spd,
    spectral_norm,
    symmetric_eig,
    thin_qr_rfactor,
    triangular_solve_lower,
)


def test_cholesky_hand_case():
    L = cholesky_spd(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=1e-15)
    np.testing.assert_allclose(L @ L.T, [[4.0, 2.0], [2.0, 3.0]], rtol=1e-15)


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky_spd(np.eye(3)), np.eye(3))


def test_cholesky_indefinite_raises():
    # eigenvalues {3, -1}
    with pytest.raises(NotSPD):
        cholesky_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        cholesky_spd(np.ones((2, 3)))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_cholesky_reconstruction_precision(dtype, tol):
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = int(rng.integers(1, 25))
        m = rng.standard_normal((d, d))
        a = ((m.T @ m + np.eye(d)) / 2 + (m.T @ m + np.eye(d)).T / 2).astype(dtype)
        L = cholesky_spd(a)
        assert L.dtype == dtype
        assert rel_frobenius_dev(L @ L.T, a) <= tol
        assert np.all(np.diagonal(L) > 0)
        assert np.all(np.triu(L, 1) == 0)


def test_solve_diagonal():
    L = cholesky_spd(2.0 * np.eye(2))
    np.testing.assert_allclose(solve_spd(L, np.array([1.0, 1.0])), [0.5, 0.5], rtol=1e-15)


def test_solve_two_by_two():
    L = cholesky_spd(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(solve_spd(L, np.array([1.0, 1.0])), [1 / 3, 1 / 3], rtol=1e-14)


def test_solve_zero_columns():
    L = cholesky_spd(np.eye(3))
    x = solve_spd(L, np.zeros((3, 0)))
    assert x.shape == (3, 0)


def test_solve_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_spd(cholesky_spd(np.eye(3)), np.ones((2, 1)))


def test_solve_residual_property():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = int(rng.integers(1, 33))
        m = rng.standard_normal((d, d))
        a = m.T @ m + np.eye(d)
        x0 = rng.standard_normal((d, 3))
        b = a @ x0
        x = solve_spd(cholesky_spd(a), b)
        assert frobenius_norm(a @ x - b) / frobenius_norm(b) <= 1e-10
        assert rel_frobenius_dev(x, x0) <= 1e-9


def test_triangular_solve_lower():
    L = np.array([[2.0, 0.0], [1.0, 3.0]])
    x = triangular_solve_lower(L, np.array([4.0, 7.0]))
    np.testing.assert_allclose(x, [2.0, 5 / 3], rtol=1e-15)


def test_qr_rank_deficient():
    r = thin_qr_rfactor(np.array([[3.0, 0.0], [4.0, 0.0]]))
    np.testing.assert_allclose(r, [[5.0, 0.0], [0.0, 0.0]], atol=1e-15)


def test_qr_orthonormal_input():
    np.testing.assert_allclose(thin_qr_rfactor(np.eye(2)), np.eye(2), atol=1e-15)


def test_qr_gram_of_rank_one_batch():
    r = thin_qr_rfactor(np.array([[1.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(r.T @ r, [[1.0, 1.0], [1.0, 1.0]], atol=1e-15)


def test_qr_gram_identity_property():
    rng = np.random.default_rng(2)
    for _ in range(15):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(1, 65))
        f = rng.standard_normal((n, d))
        r = thin_qr_rfactor(f)
        assert r.shape == (min(n, d), d)
        assert np.all(np.diagonal(r) >= 0)
        assert rel_frobenius_dev(r.T @ r, f.T @ f) <= 1e-12


def test_eig_diagonal():
    vals, vecs = symmetric_eig(np.diag([10.0, 1.0]))
    np.testing.assert_allclose(vals, [10.0, 1.0])
    np.testing.assert_allclose(np.abs(vecs), np.eye(2), atol=1e-14)


def test_eig_rank_one():
    vals, _ = symmetric_eig(np.array([[1.0, 1.0], [1.0, 1.0]]))
    np.testing.assert_allclose(vals, [2.0, 0.0], atol=1e-15)


def test_eig_zero_matrix():
    vals, vecs = symmetric_eig(np.zeros((3, 3)))
    np.testing.assert_array_equal(vals, np.zeros(3))
    np.testing.assert_array_equal(vecs, np.eye(3))


def test_eig_reconstruction_and_orthogonality():
    rng = np.random.default_rng(3)
    for _ in range(10):
        d = int(rng.integers(2, 33))
        m = rng.standard_normal((d, d))
        a = (m + m.T) / 2
        vals, vecs = symmetric_eig(a)
        assert np.all(np.diff(vals) <= 1e-12)  # descending
        assert rel_frobenius_dev(vecs @ np.diag(vals) @ vecs.T, a) <= 1e-10
        assert frobenius_norm(vecs.T @ vecs - np.eye(d)) <= 1e-9


def test_eig_sweep_cap_raises():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((6, 6))
    with pytest.raises(NoConvergence):
        symmetric_eig((m + m.T) / 2, max_sweeps=0)


def test_spectral_norm_cases():
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-8)
    assert spectral_norm(np.zeros((2, 2))) == 0.0
    assert spectral_norm(np.array([[0.0, 0.0], [0.0, 0.5]])) == pytest.approx(0.5, rel=1e-8)


def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a = rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(1, 20))))
        assert spectral_norm(a) == pytest.approx(np.linalg.svd(a, compute_uv=False)[0], rel=1e-8)


def test_frobenius_and_deviation():
    a = np.array([[0.5], [0.5]])
    b = np.array([[1 / 3], [1 / 3]])
    assert rel_frobenius_dev(a, a) == 0.0
    assert rel_frobenius_dev(a, b) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(ZeroReference):
        rel_frobenius_dev(np.eye(2), np.zeros((2, 2)))


def test_determinism_bitwise():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((12, 12))
    a = m.T @ m + np.eye(12)
    f = rng.standard_normal((20, 12))
    assert np.array_equal(cholesky_spd(a), cholesky_spd(a.copy()))
    assert np.array_equal(thin_qr_rfactor(f), thin_qr_rfactor(f.copy()))
    v1, e1 = symmetric_eig(a)
    v2, e2 = symmetric_eig(a.copy())
    assert np.array_equal(v1, v2) and np.array_equal(e1, e2)
    assert spectral_norm(f) == spectral_norm(f.copy())


def test_non_finite_rejected():
    bad = np.array([[1.0, np.nan], [np.nan, 1.0]])
    with pytest.raises(ValueError):
        cholesky_spd(bad)


def test_kernels_against_library_oracles():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d = int(rng.integers(1, 30))
        m = rng.standard_normal((d, d))
        a = m.T @ m + np.eye(d)
        np.testing.assert_allclose(cholesky_spd(a), np.linalg.cholesky(a), rtol=1e-12, atol=1e-13)
        b = rng.standard_normal((d, 2))
        np.testing.assert_allclose(
            solve_spd(cholesky_spd(a), b), np.linalg.solve(a, b), rtol=1e-9, atol=1e-12
        )
        vals, _ = symmetric_eig(a)
        np.testing.assert_allclose(vals, np.linalg.eigvalsh(a)[::-1], rtol=1e-9, atol=1e-11)
