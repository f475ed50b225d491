"""Dense real linear-algebra primitives.

Everything here is a pure function of its inputs: fixed iteration orders,
no data-dependent branching on summation, so identical inputs at identical
precision give bitwise-identical outputs.  Factorizations and solves run in
the dtype of their input (float32 or float64); the iterative estimators
(`symmetric_eig`, `spectral_norm`) compute internally in float64 because
their stopping thresholds are below single-precision resolution.

Symmetric inputs are never trusted to be exactly symmetric: routines that
require symmetry read only the lower triangle and mirror it, which removes
drift from asymmetric floating-point accumulation upstream.
"""

from __future__ import annotations

import math

import numpy as np


class NotSPD(Exception):
    """A Cholesky pivot was not strictly positive."""


class DimensionMismatch(Exception):
    """Operands have incompatible shapes."""


class NoConvergence(Exception):
    """An iterative kernel hit its sweep cap before reaching tolerance."""


class ZeroReference(Exception):
    """Relative deviation requested against a zero reference matrix."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a 2-D float array with finite entries."""
    m = np.asarray(a)
    if m.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        m = m.astype(np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def mirror_lower(a: np.ndarray) -> np.ndarray:
    """Symmetric matrix built from the lower triangle of `a`."""
    lower = np.tril(a)
    return lower + np.tril(a, -1).T


def symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2


def cholesky_spd(a) -> np.ndarray:
    """Lower Cholesky factor L of a symmetric positive-definite matrix.

    Only the lower triangle of `a` is read.  Raises NotSPD as soon as a
    pivot fails to be strictly positive, which is the signal used upstream
    to detect infeasible downdates and corrupted state.
    """
    a = as_matrix(a, "a")
    d = a.shape[0]
    if a.shape[1] != d:
        raise DimensionMismatch(f"expected square matrix, got {a.shape}")
    L = np.tril(a).astype(a.dtype, copy=True)
    for j in range(d):
        pivot = L[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0:
            raise NotSPD(f"non-positive pivot {pivot!r} at index {j}")
        ljj = np.sqrt(pivot)
        L[j, j] = ljj
        if j + 1 < d:
            L[j + 1 :, j] = (L[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / ljj
    if d:
        L[np.triu_indices(d, 1)] = 0
    return L


def solve_spd(factor: np.ndarray, b) -> np.ndarray:
    """Solve (L Lᵀ) X = B given the lower Cholesky factor L.

    Two triangular substitutions; no explicit inverse is formed.  B may
    have any number of columns, including zero.
    """
    L = np.asarray(factor)
    b = np.asarray(b)
    squeeze = b.ndim == 1
    if squeeze:
        b = b.reshape(-1, 1)
    d = L.shape[0]
    if b.shape[0] != d:
        raise DimensionMismatch(f"factor is {d}x{d} but B has {b.shape[0]} rows")
    y = np.zeros_like(b, dtype=L.dtype)
    for i in range(d):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    x = np.zeros_like(y)
    for i in range(d - 1, -1, -1):
        x[i] = (y[i] - L[i + 1 :, i] @ x[i + 1 :]) / L[i, i]
    return x[:, 0] if squeeze else x


def triangular_solve_lower(L: np.ndarray, b) -> np.ndarray:
    """Solve L X = B for lower-triangular L by forward substitution."""
    L = np.asarray(L)
    b = np.asarray(b)
    squeeze = b.ndim == 1
    if squeeze:
        b = b.reshape(-1, 1)
    d = L.shape[0]
    if b.shape[0] != d:
        raise DimensionMismatch(f"factor is {d}x{d} but B has {b.shape[0]} rows")
    x = np.zeros_like(b, dtype=L.dtype)
    for i in range(d):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x[:, 0] if squeeze else x


def spd_inverse(a) -> np.ndarray:
    """Explicit inverse of an SPD matrix via Cholesky, re-symmetrized."""
    a = as_matrix(a, "a")
    L = cholesky_spd(a)
    inv = solve_spd(L, np.eye(a.shape[0], dtype=a.dtype))
    return symmetrize(inv)


def thin_qr_rfactor(f) -> np.ndarray:
    """R factor of a thin QR of F, with Rᵀ R = Fᵀ F.

    R is min(n, d) x d upper-trapezoidal.  Row signs are flipped so the
    diagonal is non-negative, which makes R unique for full-rank inputs.
    Rank-deficient inputs simply yield (numerically) zero rows.
    """
    f = as_matrix(f, "f")
    if f.shape[0] < 1:
        raise DimensionMismatch("F must have at least one row")
    r = np.linalg.qr(f, mode="r")
    signs = np.sign(np.diagonal(r)).astype(f.dtype)
    signs[signs == 0] = 1
    return signs[:, None] * r


def _offdiag_norm(m: np.ndarray) -> float:
    off = m.copy()
    np.fill_diagonal(off, 0.0)
    return math.sqrt(float(np.sum(off * off)))


def symmetric_eig(a, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending
    and eigenvectors in matching columns.  Only the lower triangle of `a`
    is read.  Sweeps stop once the off-diagonal Frobenius mass drops below
    1e-14 * ||A||_F; exceeding `max_sweeps` raises NoConvergence.
    """
    a = as_matrix(a, "a")
    d = a.shape[0]
    if a.shape[1] != d:
        raise DimensionMismatch(f"expected square matrix, got {a.shape}")
    out_dtype = a.dtype
    m = mirror_lower(a).astype(np.float64)
    v = np.eye(d)
    total = math.sqrt(float(np.sum(m * m)))
    if d <= 1 or total == 0.0:
        vals = np.diagonal(m).copy()
        order = np.argsort(-vals, kind="stable")
        return vals[order].astype(out_dtype), v[:, order].astype(out_dtype)
    thresh = 1e-14 * total
    converged = False
    for _ in range(max_sweeps):
        if _offdiag_norm(m) <= thresh:
            converged = True
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = float(m[p, q])
                if apq == 0.0:
                    continue
                theta = (float(m[q, q]) - float(m[p, p])) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.0 if math.isinf(theta) else 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = m[:, p].copy()
                col_q = m[:, q].copy()
                m[:, p] = c * col_p - s * col_q
                m[:, q] = s * col_p + c * col_q
                row_p = m[p, :].copy()
                row_q = m[q, :].copy()
                m[p, :] = c * row_p - s * row_q
                m[q, :] = s * row_p + c * row_q
                m[p, q] = 0.0
                m[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        converged = _offdiag_norm(m) <= thresh
    if not converged:
        raise NoConvergence(f"Jacobi sweeps did not converge within {max_sweeps} sweeps")
    vals = np.diagonal(m).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order].astype(out_dtype), v[:, order].astype(out_dtype)


def spectral_norm(a, tol: float = 1e-12, max_iter: int = 1000) -> float:
    """Largest singular value of `a` by power iteration on AᵀA.

    Deterministic all-ones start vector, falling back to e1 if that lies
    in the null space.  Converges when successive estimates agree to
    `tol` relative; the cap is a hard stop, never an error.
    """
    a = as_matrix(a, "a").astype(np.float64)
    if a.size == 0:
        return 0.0
    n = a.shape[1]
    v = np.ones(n) / math.sqrt(n)
    w = a.T @ (a @ v)
    if not np.any(w):
        v = np.zeros(n)
        v[0] = 1.0
        w = a.T @ (a @ v)
        if not np.any(w):
            return 0.0
    est = 0.0
    for _ in range(max_iter):
        norm_w = math.sqrt(float(w @ w))
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        av = a @ v
        new_est = math.sqrt(float(av @ av))
        if abs(new_est - est) <= tol * max(new_est, 1e-300):
            return new_est
        est = new_est
        w = a.T @ av
    return est


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(float(np.sum(a * a)))


def rel_frobenius_dev(a, b) -> float:
    """Relative Frobenius deviation ||A - B||_F / ||B||_F."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    ref = frobenius_norm(b)
    if ref == 0.0:
        raise ZeroReference("reference matrix has zero Frobenius norm")
    return frobenius_norm(a - b) / ref
